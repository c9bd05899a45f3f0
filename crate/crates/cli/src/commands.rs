use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use disarm_core::analysis::{
    fit_age_lm_cv, fit_lmm, fit_logistic_auc, pca_reduce, train_toy_classifier, FeatureTable,
};
use disarm_core::engine::{
    default_plan, harmonize_scanner_free_with, harmonize_to_reference_with, load_split, train_on, TrainOutputs,
    TrainState, CHECKPOINT_FILE,
};
use disarm_core::metrics::{evaluate_harmonization, EvalConfig, EvaluationReport, Scan};
use disarm_core::model::ModelBundle;
use disarm_core::objective::LossReport;
use disarm_core::phantom::{make_dataset, Manifest, ManifestEntry, Split};
use disarm_core::volume::{load_volume, normalize, save_volume, WindowPlan};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Mode, PipelineConfig};
use crate::{plot, Command, Common};

pub const MODEL_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const EVAL_FILE: &str = "evaluation.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Age,
    Lmm,
    Auc,
    Classify,
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate {
            common,
            scanners,
            subjects,
            test_subjects,
            force,
        } => simulate(&common, scanners, subjects, test_subjects, force),
        Command::Train {
            common,
            manifest,
            iterations,
            resume,
        } => train(&common, &manifest, iterations, resume),
        Command::Harmonize {
            common,
            model,
            mode,
            reference,
            manifest,
            split,
            inputs,
        } => harmonize(&common, &model, mode, reference, manifest.as_deref(), split.as_deref(), &inputs),
        Command::Evaluate {
            common,
            before,
            after,
            plots,
        } => evaluate(&common, &before, &after, plots),
        Command::Analyze {
            common,
            features,
            task,
            columns,
        } => analyze(&common, &features, task, &columns),
        Command::Plot { common, report, log } => plot_cmd(&common, report.as_deref(), log.as_deref()),
    }
}

fn setup(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(common.config.as_deref())?;
    let seed = cfg.resolve_seed(common.seed)?;
    log::info!("seed {seed}");
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn simulate(common: &Common, scanners: Option<usize>, subjects: Option<usize>, test: Option<usize>, force: bool) -> Result<()> {
    let mut cfg = setup(common)?;
    if let Some(n) = scanners {
        ensure!(
            n <= cfg.phantom.scanners.len(),
            "--scanners {n} exceeds the {} configured scanner effects",
            cfg.phantom.scanners.len()
        );
        cfg.phantom.scanners.truncate(n);
    }
    if let Some(n) = subjects {
        cfg.phantom.n_subjects = n;
        cfg.phantom.n_test = cfg.phantom.n_test.min(n);
    }
    if let Some(n) = test {
        cfg.phantom.n_test = n;
    }
    let out = &common.out;
    if out.exists() && std::fs::read_dir(out)?.next().is_some() && !force {
        bail!("output directory {} is not empty (use --force)", out.display());
    }
    let p = &cfg.phantom;
    let manifest = make_dataset(&p.spec, &p.scanners, p.n_subjects, p.n_test, out)?;
    cfg.echo(out)?;
    let summary = json!({
        "volumes": manifest.entries.len(),
        "scanners": p.scanners.len(),
        "subjects": p.n_subjects,
        "test_subjects": p.n_test,
        "manifest": out.join("manifest.csv"),
    });
    write_json(&out.join("simulate.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn train(common: &Common, manifest_path: &Path, iterations: Option<u64>, resume: bool) -> Result<()> {
    let mut cfg = setup(common)?;
    if let Some(n) = iterations {
        cfg.train.iterations = n;
    }
    let manifest = Manifest::load(manifest_path)?;
    let images = load_split(&manifest, Split::Train)?;
    ensure!(!images.is_empty(), "manifest has no training volumes");
    let mut input = images[0].0.shape();
    let plan = &cfg.train.window;
    input[plan.axis.index()] = plan.window_size;
    cfg.train.model.input_shape = input;
    cfg.train.model.n_scanners = manifest.entries.iter().map(|e| e.scanner_id).max().unwrap_or(0) + 1;
    let out = &common.out;
    std::fs::create_dir_all(out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let state = if resume {
        let s = TrainState::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        let mut a = s.config.clone();
        a.iterations = cfg.train.iterations;
        ensure!(a == cfg.train, "checkpoint was trained with a different configuration");
        log::info!("resuming at iteration {}", s.iteration());
        Some(s)
    } else {
        None
    };
    cfg.echo(out)?;
    let outs = TrainOutputs {
        log: Some(out.join(LOG_FILE)),
        checkpoint_dir: Some(out.clone()),
    };
    let (state, reports) = train_on(&cfg.train, &images, state, &outs)?;
    state.bundle.save(&out.join(MODEL_FILE))?;
    let summary = json!({
        "iterations": state.iteration(),
        "steps_this_run": reports.len(),
        "final": reports.last(),
        "model": out.join(MODEL_FILE),
        "log": out.join(LOG_FILE),
    });
    write_json(&out.join("train_summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => bail!("unknown split {other:?} (expected train or test)"),
    }
}

fn harmonize(
    common: &Common,
    model: &Path,
    mode: Option<Mode>,
    reference: Option<usize>,
    manifest: Option<&Path>,
    split: Option<&str>,
    files: &[PathBuf],
) -> Result<()> {
    let cfg = setup(common)?;
    let seed = cfg.seed.unwrap_or(0);
    let mode = mode.unwrap_or(cfg.inference.mode);
    let reference = reference.or(cfg.inference.reference);
    if mode == Mode::Reference && reference.is_none() {
        bail!("reference mode needs a target scanner (--ref)");
    }
    let bundle = ModelBundle::load(model)?;
    let base = default_plan(&bundle);
    let plan = WindowPlan::new(base.window_size, cfg.inference.stride.unwrap_or(base.window_size));

    let mut inputs: Vec<(PathBuf, Option<ManifestEntry>)> = Vec::new();
    if let Some(m) = manifest {
        let m = Manifest::load(m)?;
        let want = split.map(parse_split).transpose()?;
        for e in m.entries.iter().filter(|e| want.is_none_or(|s| e.split == s)) {
            inputs.push((m.resolve(e), Some(e.clone())));
        }
    }
    inputs.extend(files.iter().map(|p| (p.clone(), None)));
    ensure!(!inputs.is_empty(), "no input volumes (pass files or --manifest)");

    let out = &common.out;
    std::fs::create_dir_all(out)?;
    let mut names = BTreeSet::new();
    let mut mapping = csv::Writer::from_path(out.join("mapping.csv"))?;
    mapping.write_record(["input", "output"])?;
    let mut entries = Vec::new();
    for (path, entry) in &inputs {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .with_context(|| format!("bad input file name {}", path.display()))?;
        let name = format!("{stem}.raw");
        ensure!(names.insert(name.clone()), "two inputs map to the same output name {name}");
        let mut v = load_volume(path)?;
        if !v.is_normalized() {
            log::warn!("{} is not in [0, 1]; min-max normalizing", path.display());
            v = normalize(&v)?;
        }
        let h = match mode {
            Mode::ScannerFree => harmonize_scanner_free_with(&v, &bundle, seed, &plan)?,
            Mode::Reference => harmonize_to_reference_with(&v, &bundle, reference.expect("checked above"), &plan)?,
        };
        save_volume(&h, out.join(&name))?;
        mapping.write_record([path.to_string_lossy().as_ref(), name.as_str()])?;
        if let Some(e) = entry {
            entries.push(ManifestEntry {
                path: name,
                ..e.clone()
            });
        }
    }
    mapping.flush()?;
    if !entries.is_empty() {
        Manifest {
            entries,
            base_dir: out.clone(),
        }
        .save(&out.join("manifest.csv"))?;
    }
    cfg.echo(out)?;
    let summary = json!({ "mode": mode, "reference": reference, "outputs": inputs.len() });
    write_json(&out.join("harmonize.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn load_scans(path: &Path) -> Result<Vec<Scan>> {
    let m = Manifest::load(path)?;
    m.entries
        .iter()
        .map(|e| {
            Ok(Scan {
                scanner_id: e.scanner_id,
                subject_id: e.subject_id.clone(),
                volume: load_volume(m.resolve(e))?,
            })
        })
        .collect()
}

fn fmt_ci(ci: Option<(f64, f64)>) -> String {
    ci.map_or("n/a".into(), |(lo, hi)| format!("[{lo:.4}, {hi:.4}]"))
}

fn eval_text(r: &EvaluationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<8} {:>10} {:>10} {:>10} {:>24}", "metric", "before", "after", "delta", "95% CI");
    for (name, d, b, a) in [
        ("JSD", &r.jsd, &r.before.jsd, &r.after.jsd),
        ("HD", &r.hd, &r.before.hd, &r.after.hd),
        ("WD", &r.wd, &r.before.wd, &r.after.wd),
    ] {
        let _ = writeln!(
            s,
            "{name:<8} {:>6.4}±{:<5.3} {:>6.4}±{:<5.3} {:>8.4} {:>24}",
            b.mean,
            b.sd,
            a.mean,
            a.sd,
            d.mean_after - d.mean_before,
            fmt_ci(d.ci)
        );
    }
    let ad = |a: &Option<disarm_core::metrics::AdResult>| a.map_or("n/a".into(), |a| format!("T={:.3} p={:.4}", a.standardized, a.p_value));
    let _ = writeln!(s, "AD-test before: {}", ad(&r.ad_before));
    let _ = writeln!(s, "AD-test after:  {}", ad(&r.ad_after));
    let _ = writeln!(s, "Struct-SSIM(original, harmonized): mean {:.4}, min {:.4}", r.struct_ssim_mean, r.struct_ssim_min);
    if let Some(t) = &r.traveling {
        let _ = writeln!(
            s,
            "traveling subjects {} ({} pairs): SSIM {:.4} -> {:.4} CI {}",
            t.n_subjects,
            t.n_pairs,
            t.ssim.mean_before,
            t.ssim.mean_after,
            fmt_ci(t.ssim.ci)
        );
    }
    s
}

fn evaluate(common: &Common, before: &Path, after: &Path, plots: bool) -> Result<()> {
    let cfg = setup(common)?;
    let m = &cfg.metrics;
    let ec = EvalConfig {
        n_bins: m.n_bins,
        ad_voxels: m.ad_voxels,
        n_boot: m.n_boot,
        alpha: m.alpha,
        seed: cfg.seed.unwrap_or(0),
    };
    let report = evaluate_harmonization(&load_scans(before)?, &load_scans(after)?, &ec)?;
    let out = &common.out;
    std::fs::create_dir_all(out)?;
    write_json(&out.join(EVAL_FILE), &report)?;
    let text = eval_text(&report);
    std::fs::write(out.join("evaluation.txt"), &text)?;
    if plots {
        eval_plots(&report, out)?;
    }
    cfg.echo(out)?;
    print!("{text}");
    Ok(())
}

fn eval_plots(r: &EvaluationReport, out: &Path) -> Result<()> {
    for (name, b, a) in [
        ("jsd", &r.before.jsd, &r.after.jsd),
        ("hd", &r.before.hd, &r.after.hd),
        ("wd", &r.before.wd, &r.after.wd),
    ] {
        let vmax = b.matrix.iter().chain(&a.matrix).flatten().fold(0.0f64, |m, &v| m.max(v));
        plot::heatmap(&b.matrix, vmax, &out.join(format!("{name}_before.png")))?;
        plot::heatmap(&a.matrix, vmax, &out.join(format!("{name}_after.png")))?;
    }
    for (name, dists) in [("density_before", &r.distributions_before), ("density_after", &r.distributions_after)] {
        let series: Vec<Vec<(f64, f64)>> = dists
            .iter()
            .map(|d| d.centers().into_iter().zip(d.probabilities.iter().copied()).collect())
            .collect();
        plot::lines(&series, &out.join(format!("{name}.png")))?;
    }
    Ok(())
}

fn feature_columns(table: &FeatureTable, cfg: &PipelineConfig, explicit: &[String]) -> Vec<String> {
    if !explicit.is_empty() {
        return explicit.to_vec();
    }
    let a = &cfg.analysis;
    let reserved = [&a.age_column, &a.group_column, &a.label_column];
    table.names().iter().filter(|n| !reserved.contains(n)).cloned().collect()
}

fn analyze(common: &Common, features: &Path, task: Task, columns: &[String]) -> Result<()> {
    let cfg = setup(common)?;
    let a = &cfg.analysis;
    let seed = cfg.seed.unwrap_or(0);
    let mut text = String::new();
    let report = match task {
        Task::Classify => {
            let dir = features.parent().unwrap_or(Path::new("."));
            let mut rdr = csv::Reader::from_path(features)?;
            let (mut vols, mut labels) = (Vec::new(), Vec::new());
            for rec in rdr.deserialize::<(String, u8)>() {
                let (p, l) = rec.context("classify input rows must be `path,label`")?;
                vols.push(load_volume(dir.join(p))?);
                labels.push(l != 0);
            }
            let refs: Vec<_> = vols.iter().collect();
            let r = train_toy_classifier(&refs, &labels, &a.classifier)?;
            let _ = writeln!(text, "{:<10} {:>8} {:>8}", "metric", "mean", "sd");
            for (n, m) in [("accuracy", r.accuracy), ("precision", r.precision), ("recall", r.recall), ("F1", r.f1)] {
                let _ = writeln!(text, "{n:<10} {:>8.4} {:>8.4}", m.mean, m.sd);
            }
            serde_json::to_value(&r)?
        }
        _ => {
            let table = FeatureTable::load_csv(features)?;
            let cols = feature_columns(&table, &cfg, columns);
            ensure!(!cols.is_empty(), "no feature columns");
            let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
            match task {
                Task::Age => {
                    let r = fit_age_lm_cv(&table, &col_refs, &a.age_column, a.k_folds, seed)?;
                    let _ = writeln!(text, "{:<6} {:>10} {:>10}", "metric", "mean", "sd");
                    for (n, m) in [("R2", r.r2), ("RMSE", r.rmse), ("BIC", r.bic)] {
                        let _ = writeln!(text, "{n:<6} {:>10.4} {:>10.4}", m.mean, m.sd);
                    }
                    serde_json::to_value(&r)?
                }
                Task::Lmm => {
                    let mut rows = Vec::new();
                    let _ = writeln!(text, "{:<20} {:>8} {:>8} {:>10}", "variable", "ICC", "R2m", "dBIC");
                    for c in &col_refs {
                        let fit = if a.volume_on_age {
                            fit_lmm(&table, c, &a.age_column, &a.group_column)?
                        } else {
                            fit_lmm(&table, &a.age_column, c, &a.group_column)?
                        };
                        let _ = writeln!(text, "{c:<20} {:>8.4} {:>8.4} {:>10.3}", fit.icc, fit.r2m, fit.delta_bic);
                        rows.push(json!({ "variable": c, "fit": fit }));
                    }
                    json!({ "volume_on_age": a.volume_on_age, "variables": rows })
                }
                Task::Auc => {
                    let label = table.column(&a.label_column)?;
                    let y: Vec<bool> = label.iter().map(|&v| v != 0.0).collect();
                    let data: Vec<&[f64]> = col_refs.iter().map(|c| table.column(c)).collect::<Result<_, _>>()?;
                    let n = table.n_rows();
                    // z-score so no single volume dominates the components
                    let stats: Vec<(f64, f64)> = data
                        .iter()
                        .map(|c| {
                            let (m, s) = disarm_core::metrics::mean_sd(c);
                            (m, if s > 0.0 { s } else { 1.0 })
                        })
                        .collect();
                    let rows: Vec<Vec<f64>> = (0..n)
                        .map(|i| data.iter().zip(&stats).map(|(c, (m, s))| (c[i] - m) / s).collect())
                        .collect();
                    let pca = pca_reduce(&rows, a.var_target)?;
                    let auc = fit_logistic_auc(&pca.projected, &y)?;
                    let cum = pca.cumulative();
                    let kept = cum[pca.n_components() - 1];
                    let _ = writeln!(
                        text,
                        "PCA kept {} of {} components ({:.1}% variance, target {:.0}%)\nAUC {:.4}",
                        pca.n_components(),
                        cols.len(),
                        100.0 * kept,
                        100.0 * a.var_target,
                        auc
                    );
                    json!({
                        "var_target": a.var_target,
                        "n_components": pca.n_components(),
                        "explained_variance": kept,
                        "auc": auc,
                    })
                }
                Task::Classify => unreachable!(),
            }
        }
    };
    let out = &common.out;
    std::fs::create_dir_all(out)?;
    let name = serde_json::to_value(task)?.as_str().unwrap_or("task").to_string();
    write_json(&out.join(format!("analysis_{name}.json")), &json!({ "task": task, "report": report }))?;
    std::fs::write(out.join(format!("analysis_{name}.txt")), &text)?;
    cfg.echo(out)?;
    print!("{text}");
    Ok(())
}

fn plot_cmd(common: &Common, report: Option<&Path>, log: Option<&Path>) -> Result<()> {
    let out = &common.out;
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    if let Some(p) = report {
        let r: EvaluationReport = serde_json::from_str(&std::fs::read_to_string(p)?)
            .with_context(|| format!("{} is not an evaluation report", p.display()))?;
        eval_plots(&r, out)?;
        written.extend(["jsd_before.png", "jsd_after.png", "density_before.png", "density_after.png"]);
    }
    if let Some(p) = log {
        let text = std::fs::read_to_string(p)?;
        let rows = text
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(LossReport::parse_csv_row)
            .collect::<Result<Vec<_>, _>>()?;
        ensure!(!rows.is_empty(), "training log {} has no rows", p.display());
        let get: [fn(&LossReport) -> f64; 9] = [
            |r| r.cc,
            |r| r.rec,
            |r| r.adv_b,
            |r| r.cls_s,
            |r| r.adv_s,
            |r| r.sf,
            |r| r.kl,
            |r| r.lat,
            |r| r.total,
        ];
        let series: Vec<Vec<(f64, f64)>> = get
            .iter()
            .map(|f| rows.iter().map(|r| (r.iter as f64, f(r))).collect())
            .collect();
        plot::lines(&series, &out.join("loss_curves.png"))?;
        written.push("loss_curves.png");
    }
    println!("{}", serde_json::to_string_pretty(&json!({ "written": written }))?);
    Ok(())
}

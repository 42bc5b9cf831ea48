use std::path::{Path, PathBuf};

use gvr_core::bank::{corpus_stats, manifest_path, save_bank};
use gvr_core::config::stage_seed;
use gvr_core::evaluate::{evaluate_episodes, evaluate_regime, merge_reports, EvalReport};
use gvr_core::head::SalientTextBank;
use gvr_core::metrics::predictions;
use gvr_core::pipeline::*;
use gvr_core::pretrain::loss_curve_csv;
use gvr_core::probe::linear_probe;
use gvr_core::splits::*;
use gvr_core::synth::{generate, SynthConfig};
use serde::Serialize;

use crate::args::Command;
use crate::run::{required, CliError, CliResult, Context};

pub fn dispatch(cmd: &Command) -> CliResult<()> {
    let mut ctx = Context::new(cmd.name(), cmd.common())?;
    match cmd {
        Command::Synth {
            synth,
            classes,
            dim,
            frames,
            train_per_class,
            test_per_class,
            common,
        } => {
            let mut cfg = match synth {
                Some(path) => serde_json::from_slice(&ctx.read_input(path)?)?,
                None => SynthConfig::default(),
            };
            let set = |slot: &mut usize, v: &Option<usize>| {
                if let Some(v) = v {
                    *slot = *v;
                }
            };
            set(&mut cfg.classes, classes);
            set(&mut cfg.dim, dim);
            set(&mut cfg.frames, frames);
            set(&mut cfg.train_per_class, train_per_class);
            set(&mut cfg.test_per_class, test_per_class);
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            let (bank, _) = generate(&cfg)?;
            ctx.lap("generate");
            let path = ctx.out_path("bank.bin");
            save_bank(&bank, &path)?;
            ctx.record_output(&path)?;
            ctx.record_output(&manifest_path(&path))?;
            ctx.write("synth.json", &serde_json::to_vec_pretty(&cfg)?)?;
        }
        Command::Stats { bank, .. } => {
            let bank = ctx.bank(bank)?;
            let stats = corpus_stats(&bank);
            ctx.write("stats.json", &serde_json::to_vec_pretty(&stats)?)?;
        }
        Command::BuildSplits { regime, bank, .. } => build_splits(&mut ctx, regime, bank)?,
        Command::Pretrain { bank, split, .. } => {
            let bank = ctx.bank(bank)?;
            let split = load_split(&mut ctx, split)?;
            ctx.lap("load");
            let (params, curve) = pretrain(&bank, &split, &ctx.cfg, &mut |_, _| Ok(()))?;
            ctx.lap("stage1");
            ctx.save_params("student.ckpt", "student", curve.len() as u64, &params)?;
            ctx.write("loss_curve.csv", loss_curve_csv(&curve).as_bytes())?;
        }
        Command::SelectTexts { bank, split, ckpt, .. } => {
            let ckpt = required(ckpt, None, "ckpt")?;
            let bank = ctx.bank(bank)?;
            let split = load_split(&mut ctx, split)?;
            let params = ctx.load_params(&ckpt, "student")?;
            let mc = model_config(&ctx.cfg, &bank)?;
            ctx.lap("load");
            let salient = select_texts(&params, &mc, &bank, &split, &ctx.cfg.tsr, &ctx.digest())?;
            ctx.lap("select");
            let path = ctx.out_path("salient.bin");
            salient.save(&path)?;
            ctx.record_output(&path)?;
            ctx.record_output(&SalientTextBank::provenance_path(&path))?;
        }
        Command::TrainHead {
            bank,
            split,
            ckpt,
            salient,
            ..
        } => {
            let ckpt = required(ckpt, None, "ckpt")?;
            let salient = required(salient, None, "salient")?;
            let bank = ctx.bank(bank)?;
            let split = load_split(&mut ctx, split)?;
            let params = ctx.load_params(&ckpt, "student")?;
            let salient = load_salient(&mut ctx, &salient)?;
            let mc = model_config(&ctx.cfg, &bank)?;
            ctx.lap("load");
            let (head, curve) = train_head(&params, &mc, &bank, &split, &salient, &ctx.cfg.head)?;
            ctx.lap("stage2");
            ctx.save_params("head.ckpt", "head", curve.len() as u64, &head)?;
            let mut csv = String::from("step,loss,lr\n");
            for r in &curve {
                csv.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
            }
            ctx.write("head_curve.csv", csv.as_bytes())?;
        }
        Command::Probe { bank, split, ckpt, .. } => {
            let ckpt = required(ckpt, None, "ckpt")?;
            let bank = ctx.bank(bank)?;
            let split = load_split(&mut ctx, split)?;
            let params = ctx.load_params(&ckpt, "student")?;
            let mc = model_config(&ctx.cfg, &bank)?;
            ctx.lap("load");
            let (train, y) = training_set(&bank, &split)?;
            let probe = linear_probe(&embed(&params, &mc, &bank, &train)?, &y, split.classes.len(), &ctx.cfg.probe)?;
            let (test, labels) = labelled_videos(&bank, &split, &split.test)?;
            let known: Vec<(usize, usize)> = test.iter().zip(&labels).filter_map(|(&v, l)| l.map(|l| (v, l))).collect();
            let accuracy = if known.is_empty() {
                None
            } else {
                let videos: Vec<usize> = known.iter().map(|k| k.0).collect();
                let pred = predictions(&probe.scores(&embed(&params, &mc, &bank, &videos)?)?);
                let hits = pred.iter().zip(&known).filter(|(p, k)| **p == k.1).count();
                Some(hits as f64 / known.len() as f64)
            };
            ctx.lap("probe");
            #[derive(Serialize)]
            struct ProbeOut<'a> {
                test_accuracy: Option<f64>,
                test_samples: usize,
                config_digest: String,
                probe: &'a gvr_core::probe::LinearProbe,
            }
            let out = ProbeOut {
                test_accuracy: accuracy,
                test_samples: known.len(),
                config_digest: ctx.digest(),
                probe: &probe,
            };
            ctx.write("probe.json", &serde_json::to_vec_pretty(&out)?)?;
        }
        Command::Eval {
            regime,
            bank,
            split,
            ckpt,
            salient,
            head,
            ..
        } => eval(&mut ctx, regime, bank, split, ckpt, salient, head)?,
        Command::Report { reports, .. } => {
            let mut parsed = Vec::with_capacity(reports.len());
            for path in reports {
                let bytes = ctx.read_input(path)?;
                parsed.push(serde_json::from_slice::<EvalReport>(&bytes)?);
            }
            let (table, radar) = merge_reports(&parsed);
            ctx.write("summary.csv", table.as_bytes())?;
            ctx.write("radar.csv", radar.as_bytes())?;
        }
    }
    ctx.finish()
}

fn load_split(ctx: &mut Context, flag: &Option<PathBuf>) -> CliResult<SplitSpec> {
    let path = required(flag, ctx.cfg.paths.splits.as_ref(), "split")?;
    let bytes = ctx.read_input(&path)?;
    Ok(SplitSpec::from_json(&bytes)?)
}

fn load_salient(ctx: &mut Context, path: &Path) -> CliResult<SalientTextBank> {
    ctx.read_input(path)?;
    ctx.read_input(&SalientTextBank::provenance_path(path))?;
    let salient = SalientTextBank::load(path)?;
    ctx.check_digest(path, &salient.digest)?;
    Ok(salient)
}

fn build_splits(ctx: &mut Context, regime: &str, bank: &Option<PathBuf>) -> CliResult<()> {
    let regime = Regime::parse(regime)?;
    let bank = ctx.bank(bank)?;
    let catalog = Catalog::from_bank(&bank);
    let seed = stage_seed(ctx.cfg.seed, "splits");
    let cfg = ctx.cfg.clone();
    match regime {
        Regime::Close => {
            ctx.write("split.json", &build_close_split(&catalog).to_json()?)?;
        }
        Regime::Lt => {
            let split = build_lt_split(&catalog, &cfg.pareto, seed)?;
            ctx.write("split.json", &split.to_json()?)?;
        }
        Regime::Open => {
            let split = build_open_split(&catalog, cfg.open.n_known, seed)?;
            ctx.write("split.json", &split.to_json()?)?;
        }
        Regime::Fewshot5x5 => {
            let f = &cfg.fewshot;
            let pools = build_fewshot_classes(&catalog, f.train_classes, f.val_classes, f.test_classes, seed)?;
            ctx.write("base.json", &build_fewshot_base(&catalog, &pools, seed).to_json()?)?;
            let episodes = (0..f.trials)
                .map(|t| build_fewshot_episode(&catalog, f.way, f.shot, &pools.test, episode_seed(seed, t)))
                .collect::<gvr_core::Result<Vec<_>>>()?;
            ctx.write("episodes.json", &serde_json::to_vec_pretty(&episodes)?)?;
        }
        Regime::FewshotCway => {
            for t in 0..cfg.fewshot.cway_trials {
                let split = build_cway_split(&catalog, cfg.fewshot.shot, episode_seed(seed, t))?;
                ctx.write(&format!("trial_{t:02}.json"), &split.to_json()?)?;
            }
        }
    }
    ctx.lap("build");
    Ok(())
}

fn eval(
    ctx: &mut Context,
    regime: &str,
    bank: &Option<PathBuf>,
    split: &Option<PathBuf>,
    ckpt: &Option<PathBuf>,
    salient: &Option<PathBuf>,
    head: &Option<PathBuf>,
) -> CliResult<()> {
    let regime = Regime::parse(regime)?;
    let ckpt = required(ckpt, None, "ckpt")?;
    let split_path = required(split, ctx.cfg.paths.splits.as_ref(), "split")?;
    let split_bytes = ctx.read_input(&split_path)?;
    let report = if regime == Regime::Fewshot5x5 {
        let episodes: Vec<SplitSpec> = serde_json::from_slice(&split_bytes)?;
        if episodes.iter().any(|e| e.regime != regime) {
            return Err(CliError::Validation(format!(
                "{} does not hold {} episodes",
                split_path.display(),
                regime.name()
            )));
        }
        let bank = ctx.bank(bank)?;
        let params = ctx.load_params(&ckpt, "student")?;
        let mc = model_config(&ctx.cfg, &bank)?;
        ctx.lap("load");
        evaluate_episodes(&bank, &episodes, &mc, &ctx.cfg, &mut |_| Ok(params.clone()))?
    } else {
        let salient = required(salient, None, "salient")?;
        let head = required(head, None, "head")?;
        let split = SplitSpec::from_json(&split_bytes)?;
        if split.regime != regime {
            return Err(CliError::Validation(format!(
                "{} is a {} split, --regime asks for {}",
                split_path.display(),
                split.regime.name(),
                regime.name()
            )));
        }
        let bank = ctx.bank(bank)?;
        let params = ctx.load_params(&ckpt, "student")?;
        let mc = model_config(&ctx.cfg, &bank)?;
        let salient = load_salient(ctx, &salient)?;
        let head = ctx.load_params(&head, "head")?;
        ctx.lap("load");
        evaluate_regime(&bank, &split, &params, &mc, &head, &salient, &ctx.cfg)?
    };
    ctx.lap("evaluate");
    ctx.write("report.json", &serde_json::to_vec_pretty(&report)?)?;
    ctx.write("report.csv", report.to_csv().as_bytes())?;
    Ok(())
}

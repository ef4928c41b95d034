use clap::{Parser, Subcommand};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use vfpt::analysis::{
    attention_export, convexity_map, fixed_subset, landscape, write_pgm, Direction, EigenOptions, Objective,
    TunedObjective,
};
use vfpt::backbone::Backbone;
use vfpt::checkpoint::{load_backbone, load_model, model_tensors, prepare_task};
use vfpt::config::{Manifest, RunConfig};
use vfpt::data::{Dataset, Normalizer};
use vfpt::io;
use vfpt::prompt::TunedModel;
use vfpt::training::{alpha_sweep, evaluate, grid_search, pretrain, tune_once, TuneData};
use vfpt::{selftest, Error, Result};

#[derive(Parser)]
#[command(name = "vfpt", version, about = "Fourier prompt tuning on a frozen tiny ViT")]
struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed, overriding `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain a backbone on the source task and save it frozen.
    Pretrain,
    /// Tune prompts and head on the target task.
    Tune {
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Evaluate a tuned model checkpoint on the validation and test splits.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Tune once per (alpha, seed) and write the alpha-accuracy curve.
    SweepAlpha {
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1.0")]
        alphas: Vec<f64>,
        /// Number of seeds, `0..N`; the config's `train.seeds` when omitted.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Tune once per (lr, weight decay) cell and pick the best by validation accuracy.
    GridSearch {
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Loss surface around a tuned model along two random directions.
    Landscape {
        #[arg(long)]
        model: PathBuf,
    },
    /// Extreme Hessian eigenvalues and convexity on the landscape grid.
    HessianMap {
        #[arg(long)]
        model: PathBuf,
    },
    /// Last-layer attention of one test image.
    Attention {
        #[arg(long)]
        model: PathBuf,
        /// Test example, overriding `analysis.image_index`.
        #[arg(long)]
        index: Option<usize>,
    },
    /// FFT oracle, gradient, adjoint and alpha=0 equivalence suites.
    Selftest,
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Pretrain => "pretrain",
            Cmd::Tune { .. } => "tune",
            Cmd::Eval { .. } => "eval",
            Cmd::SweepAlpha { .. } => "sweep-alpha",
            Cmd::GridSearch { .. } => "grid-search",
            Cmd::Landscape { .. } => "landscape",
            Cmd::HessianMap { .. } => "hessian-map",
            Cmd::Attention { .. } => "attention",
            Cmd::Selftest => "selftest",
        }
    }
}

/// Output directory plus manifest; refuses to overwrite any input file.
struct Run {
    dir: PathBuf,
    manifest: Manifest,
    inputs: Vec<PathBuf>,
}

impl Run {
    fn new(cfg: &RunConfig, command: String, inputs: Vec<PathBuf>) -> Result<Self> {
        std::fs::create_dir_all(&cfg.output_dir)?;
        Ok(Self {
            dir: cfg.output_dir.clone(),
            manifest: Manifest::new(&command, cfg),
            inputs,
        })
    }

    fn guard(&self, name: &str) -> Result<()> {
        let Ok(dest) = self.dir.join(name).canonicalize() else {
            return Ok(());
        };
        for input in &self.inputs {
            if input.canonicalize().is_ok_and(|p| p == dest) {
                return Err(Error::config(
                    "output_dir",
                    format!("writing `{name}` would overwrite input {}", input.display()),
                ));
            }
        }
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.guard(name)?;
        self.manifest.write(&self.dir, name, bytes)
    }

    fn save(&mut self, name: &str, tensors: &[(String, vfpt::tensor::Tensor)]) -> Result<()> {
        self.write(name, &io::encode(tensors)?)
    }

    fn pgm(&mut self, name: &str, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
        let side = format!("{name}.scale.txt");
        self.guard(name)?;
        self.guard(&side)?;
        write_pgm(&self.dir.join(name), rows, cols, values)?;
        self.manifest.record(&self.dir, name)?;
        self.manifest.record(&self.dir, &side)
    }

    fn finish(mut self, cfg: &RunConfig) -> Result<PathBuf> {
        self.write("config.toml", cfg.to_toml().as_bytes())?;
        self.manifest.finish(&self.dir)?;
        Ok(self.dir)
    }
}

fn json(v: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s.into_bytes()
}

fn backbone_path(cfg: &mut RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        cfg.backbone_checkpoint = Some(p);
    }
    cfg.backbone_checkpoint
        .clone()
        .ok_or_else(|| Error::config("backbone_checkpoint", "no backbone checkpoint given (config or --backbone)"))
}

fn target_task(cfg: &RunConfig, path: &Path) -> Result<(Arc<Backbone>, Dataset)> {
    let (bb, norm) = load_backbone(path, &cfg.backbone)?;
    Ok((bb, prepare_task(&cfg.data, &norm)?))
}

fn tuned_model(cfg: &RunConfig, path: &Path) -> Result<(TunedModel, Dataset, Normalizer)> {
    let (model, norm) = load_model(path, &cfg.backbone, &cfg.prompt)?;
    let data = prepare_task(&cfg.data, &norm)?;
    if model.head.num_classes() != cfg.data.num_classes {
        return Err(Error::config(
            "data.num_classes",
            format!("model head has {} classes", model.head.num_classes()),
        ));
    }
    Ok((model, data, norm))
}

fn directions(cfg: &RunConfig, model: &TunedModel) -> (Vec<f64>, Vec<f64>) {
    let s = cfg.analysis.direction_seed;
    (
        Direction::random(model, s, 0).flat(),
        Direction::random(model, s, 1).flat(),
    )
}

/// Returns the run directory and whether every check passed.
fn execute(cli: Cli, argv: String) -> Result<(PathBuf, bool)> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let mut ok = true;
    let run = match cli.cmd {
        Cmd::Pretrain => {
            let mut run = Run::new(&cfg, argv, vec![])?;
            eprintln!("pretraining on {} examples", cfg.pretrain.task.train_count);
            let p = pretrain(&cfg.backbone, &cfg.pretrain, cfg.seed)?;
            run.save("backbone.vfpt", &p.checkpoint_tensors())?;
            run.write("pretrain.csv", p.record.to_csv().as_bytes())?;
            run.write("summary.json", p.record.summary_json().as_bytes())?;
            println!("source val accuracy {:.4}", p.record.final_val_acc());
            run
        }
        Cmd::Tune { backbone } => {
            let path = backbone_path(&mut cfg, backbone)?;
            let mut run = Run::new(&cfg, argv, vec![path.clone()])?;
            let (bb, data) = target_task(&cfg, &path)?;
            let tune = TuneData {
                train: &data.train,
                val: &data.val,
                test: Some(&data.test),
            };
            let (model, rec) = tune_once(
                &bb,
                &cfg.prompt,
                cfg.data.num_classes,
                tune,
                &cfg.train,
                cfg.train.base_lr,
                cfg.train.weight_decay,
                cfg.seed,
            )?;
            let (_, norm) = load_backbone(&path, &cfg.backbone)?;
            run.save("model.vfpt", &model_tensors(&model, &norm))?;
            run.write("train.csv", rec.to_csv().as_bytes())?;
            run.write("summary.json", rec.summary_json().as_bytes())?;
            println!(
                "val accuracy {:.4}, test accuracy {:.4}{}",
                rec.final_val_acc(),
                rec.test_acc.unwrap_or(f64::NAN),
                if rec.diverged { " (diverged)" } else { "" }
            );
            run
        }
        Cmd::Eval { model } => {
            let mut run = Run::new(&cfg, argv, vec![model.clone()])?;
            let (m, data, _) = tuned_model(&cfg, &model)?;
            let (vl, va) = evaluate(&m, &data.val)?;
            let (tl, ta) = evaluate(&m, &data.test)?;
            let v = serde_json::json!({
                "val_loss": vl, "val_acc": va, "test_loss": tl, "test_acc": ta,
                "tuned_params": m.parameter_count().tuned,
            });
            run.write("eval.json", &json(&v))?;
            println!("val accuracy {va:.4}, test accuracy {ta:.4}");
            run
        }
        Cmd::SweepAlpha {
            backbone,
            alphas,
            seeds,
        } => {
            let path = backbone_path(&mut cfg, backbone)?;
            if let Some(n) = seeds {
                cfg.train.seeds = (0..n).collect();
            }
            let mut run = Run::new(&cfg, argv, vec![path.clone()])?;
            let (bb, data) = target_task(&cfg, &path)?;
            let tune = TuneData {
                train: &data.train,
                val: &data.val,
                test: Some(&data.test),
            };
            let res = alpha_sweep(
                &bb,
                &cfg.prompt,
                cfg.data.num_classes,
                tune,
                &cfg.train,
                &alphas,
                &cfg.train.seeds,
                cfg.train.base_lr,
                cfg.train.weight_decay,
            )?;
            run.write("sweep.csv", res.to_csv().as_bytes())?;
            run.write("curve.csv", res.curve_csv().as_bytes())?;
            for s in &res.summary {
                println!("alpha {:<5} val accuracy {:.4} ± {:.4}", s.alpha, s.mean_val_acc, s.std_val_acc);
            }
            run
        }
        Cmd::GridSearch { backbone } => {
            let path = backbone_path(&mut cfg, backbone)?;
            let mut run = Run::new(&cfg, argv, vec![path.clone()])?;
            let (bb, data) = target_task(&cfg, &path)?;
            let tune = TuneData {
                train: &data.train,
                val: &data.val,
                test: None,
            };
            let res = grid_search(&bb, &cfg.prompt, cfg.data.num_classes, tune, &cfg.train, cfg.seed)?;
            run.write("grid.csv", res.to_csv().as_bytes())?;
            let best = res.best.map(|(lr, wd)| serde_json::json!({"lr": lr, "weight_decay": wd}));
            run.write("best.json", &json(&serde_json::json!({ "best": best })))?;
            match res.best {
                Some((lr, wd)) => println!("best lr {lr}, weight decay {wd}"),
                None => println!("every cell diverged"),
            }
            run
        }
        Cmd::Landscape { model } => {
            let mut run = Run::new(&cfg, argv, vec![model.clone()])?;
            let (m, data, _) = tuned_model(&cfg, &model)?;
            let obj = TunedObjective::new(&m, fixed_subset(&data.train, cfg.analysis.subset_size, cfg.seed))?;
            let theta = obj.theta();
            let (d1, d2) = directions(&cfg, &m);
            let r = cfg.analysis.resolution;
            let grid = landscape(&obj, &theta, &d1, &d2, r)?;
            run.write("landscape.csv", grid.to_csv().as_bytes())?;
            let losses: Vec<f64> = grid.cells.iter().map(|c| c.loss).collect();
            run.pgm("landscape.pgm", r, r, &losses)?;
            println!("centre loss {:?}, {} cells", grid.center().loss, grid.cells.len());
            run
        }
        Cmd::HessianMap { model } => {
            let mut run = Run::new(&cfg, argv, vec![model.clone()])?;
            let (m, data, _) = tuned_model(&cfg, &model)?;
            let obj = TunedObjective::new(&m, fixed_subset(&data.train, cfg.analysis.subset_size, cfg.seed))?;
            let theta = obj.theta();
            let (d1, d2) = directions(&cfg, &m);
            let a = &cfg.analysis;
            let opts = EigenOptions {
                tol: a.eig_tol,
                max_iter: a.eig_max_iter,
                seed: a.direction_seed,
            };
            eprintln!("{} cells, {} parameters", a.resolution * a.resolution, obj.dim());
            let grid = convexity_map(&obj, &theta, &d1, &d2, a.resolution, a.tau, &opts)?;
            run.write("hessian.csv", grid.to_csv().as_bytes())?;
            let ratios: Vec<f64> = grid.cells.iter().map(|c| c.eig.map_or(f64::NAN, |e| e.ratio)).collect();
            run.pgm("ratio.pgm", a.resolution, a.resolution, &ratios)?;
            let frac = grid.convex_fraction();
            let v = serde_json::json!({
                "tau": a.tau,
                "convex_fraction": if frac.is_finite() { Some(frac) } else { None },
                "unconverged": grid.unconverged(),
                "cells": grid.cells.len(),
            });
            run.write("convexity.json", &json(&v))?;
            println!("convex fraction {frac:.4} (tau {}), {} unconverged", a.tau, grid.unconverged());
            run
        }
        Cmd::Attention { model, index } => {
            let index = index.unwrap_or(cfg.analysis.image_index);
            cfg.analysis.image_index = index;
            let mut run = Run::new(&cfg, argv, vec![model.clone()])?;
            let (m, data, _) = tuned_model(&cfg, &model)?;
            let ex = data.test.examples.get(index).ok_or_else(|| {
                Error::config("analysis.image_index", format!("test split has {} examples", data.test.len()))
            })?;
            let map = attention_export(&m, &ex.image)?;
            let s = map.matrix.shape()[0];
            run.write("attention.csv", map.to_csv().as_bytes())?;
            run.pgm("attention.pgm", s, s, map.matrix.data())?;
            let v = serde_json::json!({
                "index": index,
                "label": ex.label,
                "segments": map.segments,
                "prompt_mass": if map.prompt_mass.is_finite() { Some(map.prompt_mass) } else { None },
            });
            run.write("attention.json", &json(&v))?;
            println!("{s} tokens, mean prompt attention {:.4}", map.prompt_mass);
            run
        }
        Cmd::Selftest => {
            let mut run = Run::new(&cfg, argv, vec![])?;
            let checks = selftest::run_all();
            let mut csv = String::from("check,passed,detail\n");
            for c in &checks {
                println!(
                    "{} {:<20} {} ({:.2}s)",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail,
                    c.seconds
                );
                writeln!(csv, "{},{},\"{}\"", c.name, c.passed, c.detail).unwrap();
                ok &= c.passed;
            }
            run.write("selftest.csv", csv.as_bytes())?;
            run
        }
    };
    Ok((run.finish(&cfg)?, ok))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let name = cli.cmd.name();
    let argv = std::iter::once("vfpt".to_string())
        .chain(std::env::args().skip(1))
        .collect::<Vec<_>>()
        .join(" ");
    match execute(cli, argv) {
        Ok((dir, ok)) => {
            eprintln!("{name}: artifacts in {}", dir.display());
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Io(_) | Error::Format { .. } => 3,
                _ => 1,
            })
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use icd_core::tensor::GradCheckOptions;
use icd_harness::ablate::{run_ablation, write_results, Ablation};
use icd_harness::checks::{full_gradcheck, routing_check};
use icd_harness::heatmap::write_mask;
use icd_harness::metrics::append_rows;
use icd_harness::scene::build_dataset;
use icd_harness::train::{
    condition_batch, distill_student, prepare, prepare_from, pretrain_decoder, save_teacher, ConditionRngs,
    DecoderState, Prepared, RunKind,
};
use icd_harness::{checkpoint, ExperimentConfig, HarnessError, Result};
use log::{error, info};

#[derive(Parser)]
#[command(name = "icd", about = "Instance-conditional distillation experiments on synthetic scenes")]
struct Cli {
    /// Plain-text `key = value` config; later keys override earlier ones.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Student seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Attention,
    Heads,
    Aux,
    Lambda,
    Cascade,
    Inherit,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Attention => Ablation::Attention,
            AblationArg::Heads => Ablation::Heads,
            AblationArg::Aux => Ablation::Aux,
            AblationArg::Lambda => Ablation::Lambda,
            AblationArg::Cascade => Ablation::Cascade,
            AblationArg::Inherit => Ablation::Inherit,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the scene dataset and write its statistics.
    GenData,
    /// Train the teacher and save `teacher.icdc`.
    TrainTeacher,
    /// Train one student against the saved teacher.
    Distill {
        /// Detection loss only, no decoder.
        #[arg(long)]
        baseline: bool,
    },
    /// Sweep one factor.
    Ablate {
        #[arg(value_enum)]
        which: AblationArg,
        /// Number of seeds, starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Write attention heatmaps of a decoder trained on teacher features.
    ExportAttn {
        #[arg(long, default_value_t = 0)]
        instance: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        /// Decoder training iterations before export.
        #[arg(long, default_value_t = 200)]
        iters: usize,
    },
    /// Finite-difference check of every op and the composed objective.
    Gradcheck {
        /// Entries probed per tensor of the composed objective (all if unset).
        #[arg(long)]
        entries: Option<usize>,
    },
    /// Loss × parameter-group routing audit plus the mutation run.
    RoutingCheck,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            info!("no config file, using defaults");
            ExperimentConfig::default()
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn teacher_path(out: &Path) -> PathBuf {
    out.join("teacher.icdc")
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| HarnessError::io(p, e))
}

/// Loads the saved teacher, training and saving one if none exists.
fn prepared(cfg: &ExperimentConfig, out: &Path) -> Result<Prepared> {
    let path = teacher_path(out);
    if path.exists() {
        info!("loading teacher from {}", path.display());
        prepare_from(cfg, &path)
    } else {
        info!("no teacher at {}, training one", path.display());
        let p = prepare(cfg)?;
        save_teacher(&path, &p.teacher.detector, &p.data)?;
        append_rows(&out.join("metrics.csv"), &p.teacher.rows)?;
        Ok(p)
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    let out = &cli.out_dir;
    ensure_dir(out)?;
    match &cli.cmd {
        Cmd::GenData => {
            let data = build_dataset(&cfg)?;
            checkpoint::save(&out.join("dataset_stats.icdc"), &checkpoint::stats_tensors(&data.stats)?)?;
            let mut text = format!("train {} eval {}\n", data.train.len(), data.eval.len());
            for c in 0..cfg.classes {
                text.push_str(&format!(
                    "class {c}: count {} mean {:.3}x{:.3} std {:.3}x{:.3}\n",
                    data.stats.class_freq[c],
                    data.stats.size_mean[c][0],
                    data.stats.size_mean[c][1],
                    data.stats.size_std[c][0],
                    data.stats.size_std[c][1]
                ));
            }
            for (i, s) in data.train.iter().take(4).enumerate() {
                let n = s.size;
                let mut ppm = format!("P6\n{n} {n}\n255\n").into_bytes();
                for p in 0..n * n {
                    for ch in 0..3 {
                        ppm.push((s.image[ch * n * n + p].clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
                let path = out.join(format!("scene_{i}.ppm"));
                std::fs::write(&path, ppm).map_err(|e| HarnessError::io(&path, e))?;
            }
            let path = out.join("dataset.txt");
            std::fs::write(&path, &text).map_err(|e| HarnessError::io(&path, e))?;
            print!("{text}");
            Ok(true)
        }
        Cmd::TrainTeacher => {
            let p = prepare(&cfg)?;
            save_teacher(&teacher_path(out), &p.teacher.detector, &p.data)?;
            append_rows(&out.join("metrics.csv"), &p.teacher.rows)?;
            println!("teacher toy AP {:.4}", p.teacher.toy_ap);
            Ok(true)
        }
        Cmd::Distill { baseline } => {
            let p = prepared(&cfg, out)?;
            let (kind, name) = if *baseline {
                (RunKind::Baseline, format!("baseline-s{}", cfg.seed))
            } else {
                (RunKind::Distill, format!("distill-s{}", cfg.seed))
            };
            let run = distill_student(&cfg, &p.data, &p.teacher.detector, &p.cache, kind, &name)?;
            checkpoint::save(&out.join(format!("{name}.icdc")), &checkpoint::group_tensors(&run.student.group))?;
            append_rows(&out.join("metrics.csv"), &run.rows)?;
            println!("{name}: toy AP {:.4} (teacher {:.4})", run.toy_ap, p.teacher.toy_ap);
            Ok(true)
        }
        Cmd::Ablate { which, seeds } => {
            let p = prepared(&cfg, out)?;
            let ablation = Ablation::from(*which);
            let seeds: Vec<u64> = (cfg.seed..cfg.seed + seeds).collect();
            let res = run_ablation(ablation, &cfg, &p, &seeds)?;
            write_results(out, ablation, &res)?;
            print!("{}", res.csv());
            for (s, m) in res.means() {
                println!("mean {s}: {m:.4}");
            }
            Ok(true)
        }
        Cmd::ExportAttn { instance, head, iters } => {
            let p = prepared(&cfg, out)?;
            let mut state = DecoderState::new(&cfg)?;
            pretrain_decoder(&cfg, &p.data, &p.cache, &mut state, *iters, cfg.seed)?;
            let idx: Vec<usize> = (0..cfg.batch.min(p.data.train.len())).collect();
            let c = condition_batch(&cfg, &p.data, &p.cache, &idx, &state, &mut ConditionRngs::new(cfg.seed))?;
            let k = c.out.last();
            if *instance >= k.instances() || *head >= k.heads() {
                return Err(HarnessError::Config(format!(
                    "instance {instance} / head {head} out of range ({} instances, {} heads)",
                    k.instances(),
                    k.heads()
                )));
            }
            let dir = out.join("attention");
            let files =
                write_mask(&dir, &format!("inst{instance}_head{head}"), &k.mask(*instance, *head), &c.flat.shapes)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(true)
        }
        Cmd::Gradcheck { entries } => {
            let reports = full_gradcheck(&GradCheckOptions::default(), *entries)?;
            let mut ok = true;
            for r in &reports {
                let pass = r.report.passed();
                ok &= pass;
                println!(
                    "{:<16} max rel err {:.3e}  {}",
                    r.name,
                    r.report.max_rel_err(),
                    if pass { "ok" } else { "FAIL" }
                );
                for pc in r.report.params.iter().filter(|pc| !pc.passed) {
                    println!("    {} entry {}: {:.3e}", pc.name, pc.worst_index, pc.max_rel_err);
                }
            }
            Ok(ok)
        }
        Cmd::RoutingCheck => {
            let report = routing_check(cfg.seed, false)?;
            print!("{report}");
            let mutated = routing_check(cfg.seed, true)?;
            let caught = !mutated.passed();
            println!("audit {}", if report.passed() { "passed" } else { "FAILED" });
            println!("mutation (mask stop-gradient removed) {}", if caught { "detected" } else { "NOT detected" });
            Ok(report.passed() && caught)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}

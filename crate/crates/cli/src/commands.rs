use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use lipdistill::ablation::{self, RowSummary, ROWS};
use lipdistill::data::{dump_dataset, generate_dataset, load_dataset, Dataset};
use lipdistill::gradcheck::GradCheckConfig;
use lipdistill::gradsuite::{check_component, COMPONENTS};
use lipdistill::nn::Role;
use lipdistill::train::{
    evaluate_checkpoint, train_student, train_teacher, write_metrics_jsonl, Checkpoint, StepRecord, TrainConfig,
    TrainOutcome,
};
use lipdistill::AlignmentMap;
use serde_json::{json, Value};

use crate::{CliError, Command, Common, DataSource, RoleArg, RunConfig, TrainFlags};

type Res<T = ()> = Result<T, CliError>;

fn load_config(common: &Common, overrides: &[(String, Value)]) -> Res<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), overrides)?;
    if let Some(d) = &common.out_dir {
        cfg.out_dir = Some(d.display().to_string());
    }
    Ok(cfg)
}

fn apply_flags(cfg: &mut RunConfig, f: &TrainFlags) {
    cfg.distill.kd1_enabled |= f.kd1;
    cfg.distill.kd2_enabled |= f.kd2;
    cfg.distill.mixup_enabled |= f.mixup;
    if let Some(s) = f.sigma {
        cfg.distill.sigma = s;
    }
    if f.no_word_isolation {
        cfg.train.word_isolation = false;
    }
    if f.no_spec_augment {
        cfg.train.spec_augment = false;
    }
}

fn dataset(cfg: &RunConfig, src: &DataSource) -> Res<Dataset> {
    match &src.data_dir {
        Some(dir) => {
            let ds = load_dataset(dir).map_err(|e| CliError::Validation(e.to_string()))?;
            if ds.config != cfg.data {
                return Err(CliError::Validation(format!(
                    "{}: dataset was generated with different data.* settings",
                    dir.display()
                )));
            }
            Ok(ds)
        }
        None => Ok(generate_dataset(&cfg.data)?),
    }
}

fn load_teacher(path: Option<&Path>, cfg: &RunConfig) -> Res<Checkpoint> {
    let path = path.ok_or_else(|| CliError::Validation("training a student needs --teacher <checkpoint dir>".into()))?;
    let ck = Checkpoint::load(path).map_err(|e| CliError::Validation(e.to_string()))?;
    if ck.role != Role::Teacher {
        return Err(CliError::Validation(format!("{} is not a teacher checkpoint", path.display())));
    }
    if ck.model.encoder_dim() != cfg.model.encoder_dim() {
        return Err(CliError::Validation(format!(
            "teacher encoder width {} differs from the student's {} (model.hidden)",
            ck.model.encoder_dim(),
            cfg.model.encoder_dim()
        )));
    }
    if (ck.model.audio_frames, ck.model.audio_bins) != (cfg.data.audio_frames, cfg.data.audio_bins) {
        return Err(CliError::Validation("teacher audio geometry differs from data.*".into()));
    }
    Ok(ck)
}

fn write_steps(path: &Path, steps: &[StepRecord]) -> Res {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for s in steps {
        writeln!(f, "{}", serde_json::to_string(s).expect("records serialize"))?;
    }
    f.flush()?;
    Ok(())
}

fn write_json(path: &Path, v: &Value) -> Res {
    fs::write(path, serde_json::to_string_pretty(v).expect("json serializes") + "\n")?;
    Ok(())
}

/// metrics.jsonl, steps.jsonl, checkpoint/ and test.json under `dir`.
fn save_run(dir: &Path, out: &TrainOutcome, test_top1: f64) -> Res {
    fs::create_dir_all(dir)?;
    write_metrics_jsonl(&dir.join("metrics.jsonl"), &out.metrics)?;
    write_steps(&dir.join("steps.jsonl"), &out.steps)?;
    out.best.save(&dir.join("checkpoint"))?;
    let best = out.best.metrics.as_ref().map(|m| m.val_top1);
    write_json(
        &dir.join("test.json"),
        &json!({ "best_epoch": out.best.epoch, "best_val_top1": best, "test_top1": test_top1 }),
    )
}

fn gen_data(cfg: &RunConfig) -> Res {
    let ds = generate_dataset(&cfg.data)?;
    let manifest = dump_dataset(&ds, &cfg.out_root().join("data"))?;
    println!("{}", manifest.display());
    Ok(())
}

fn train(cfg: &RunConfig, role: RoleArg, teacher: Option<&Path>, src: &DataSource) -> Res {
    let (dir, out) = match role {
        RoleArg::Teacher => {
            let ds = dataset(cfg, src)?;
            (cfg.out_root().join("teacher"), (train_teacher(&ds, &cfg.model, &cfg.train, cfg.distill.epsilon)?, ds))
        }
        RoleArg::Student => {
            let ck = load_teacher(teacher, cfg)?;
            let ds = dataset(cfg, src)?;
            let out = train_student(&ds, &ck, &cfg.model, &cfg.train, &cfg.distill)?;
            (cfg.out_root().join("student"), (out, ds))
        }
    };
    let (out, ds) = out;
    let test = evaluate_checkpoint(&out.best, &ds.test)?;
    save_run(&dir, &out, test)?;
    println!(
        "{} best epoch {} test top-1 {:.4}; wrote {}",
        match role {
            RoleArg::Teacher => "teacher",
            RoleArg::Student => "student",
        },
        out.best.epoch,
        test,
        dir.display()
    );
    Ok(())
}

fn run_ablation(cfg: &RunConfig, teacher: Option<&Path>, src: &DataSource) -> Res {
    let root = cfg.out_root().join("ablation");
    let shared = teacher.map(|p| load_teacher(Some(p), cfg)).transpose()?;
    let ds = dataset(cfg, src)?;
    let mut results: Vec<(String, f64)> = Vec::new();
    for &seed in &cfg.ablation.seeds {
        let teacher = match &shared {
            Some(t) => t.clone(),
            None => {
                let tc = TrainConfig { seed, ..cfg.train.clone() };
                let out = train_teacher(&ds, &cfg.model, &tc, cfg.distill.epsilon)?;
                let test = evaluate_checkpoint(&out.best, &ds.test)?;
                save_run(&root.join("teacher").join(format!("seed{seed}")), &out, test)?;
                eprintln!("teacher seed {seed}: test top-1 {test:.4}");
                out.best
            }
        };
        for row in &ROWS {
            let cell = ablation::run_cell(&ds, &teacher, &cfg.model, &cfg.train, &cfg.distill, row, seed)?;
            save_run(&root.join(row.name).join(format!("seed{seed}")), &cell.outcome, cell.test_top1)?;
            eprintln!("{} seed {seed}: test top-1 {:.4}", row.name, cell.test_top1);
            results.push((row.name.to_string(), cell.test_top1));
        }
    }
    let summary: Vec<RowSummary> = ablation::summarize(&results);
    fs::write(root.join("summary.csv"), ablation::summary_csv(&summary))?;
    let text = ablation::summary_text(&summary);
    fs::write(root.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: &Path, src: &DataSource) -> Res {
    let ck = Checkpoint::load(checkpoint).map_err(|e| CliError::Validation(e.to_string()))?;
    let ds = dataset(cfg, src)?;
    let top1 = evaluate_checkpoint(&ck, &ds.test)?;
    println!("{}", json!({ "checkpoint": checkpoint.display().to_string(), "split": "test", "top1": top1 }));
    Ok(())
}

fn gradcheck(seeds: &[u64], corrupt: Option<&str>) -> Res {
    if let Some(c) = corrupt {
        if !COMPONENTS.contains(&c) {
            return Err(CliError::Validation(format!("unknown component {c:?}")));
        }
    }
    if seeds.is_empty() {
        return Err(CliError::Validation("gradcheck needs at least one seed".into()));
    }
    let cfg = GradCheckConfig::default();
    let mut failed = Vec::new();
    for name in COMPONENTS {
        let mut worst = 0.0f64;
        let mut ok = true;
        for &seed in seeds {
            let r = check_component(name, seed, corrupt == Some(name), cfg)?;
            worst = worst.max(r.max_rel_err);
            ok &= r.passed;
        }
        println!("{name:<20} max_rel_err {worst:.3e}  {}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(name);
        }
    }
    println!("{} components, tolerance {:e}, h {:e}, seeds {seeds:?}", COMPONENTS.len(), cfg.tol, cfg.h);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn inspect_align(cfg: &RunConfig, ta: usize, j: usize, sigma: f64, window: usize, csv: Option<PathBuf>) -> Res {
    let map = AlignmentMap::build(ta, j, sigma, window).map_err(|e| CliError::Validation(e.to_string()))?;
    let csv = csv.unwrap_or_else(|| cfg.out_root().join("align.csv"));
    if let Some(parent) = csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&csv, map.to_csv())?;
    let centers = csv.with_extension("centers.csv");
    let mut c = String::from("j,center\n");
    for (i, k) in map.centers().iter().enumerate() {
        c.push_str(&format!("{i},{k}\n"));
    }
    fs::write(&centers, c)?;
    let dense = map.dense();
    let mut max_dev = 0.0f64;
    for row in dense.data().chunks(ta) {
        max_dev = max_dev.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    println!("map {j}x{ta} sigma {sigma} window {window}");
    println!("row sums: max |sum - 1| = {max_dev:.3e}");
    println!("centers: {:?}", map.centers());
    println!("wrote {} and {}", csv.display(), centers.display());
    Ok(())
}

pub fn dispatch(cmd: Command, overrides: &[(String, Value)]) -> Res {
    match cmd {
        Command::GenData { common } => {
            let cfg = load_config(&common, overrides)?;
            cfg.data.validate().map_err(CliError::Validation)?;
            gen_data(&cfg)
        }
        Command::Train { role, teacher, flags, data, common } => {
            let mut cfg = load_config(&common, overrides)?;
            apply_flags(&mut cfg, &flags);
            cfg.validate()?;
            if role == RoleArg::Teacher && teacher.is_some() {
                return Err(CliError::Validation("--teacher only applies to `train student`".into()));
            }
            train(&cfg, role, teacher.as_deref(), &data)
        }
        Command::Ablation { teacher, seeds, data, common } => {
            let mut cfg = load_config(&common, overrides)?;
            if let Some(s) = seeds {
                cfg.ablation.seeds = s;
            }
            cfg.validate()?;
            run_ablation(&cfg, teacher.as_deref(), &data)
        }
        Command::Eval { checkpoint, data, common } => {
            let cfg = load_config(&common, overrides)?;
            cfg.data.validate().map_err(CliError::Validation)?;
            eval(&cfg, &checkpoint, &data)
        }
        Command::Gradcheck { seeds, corrupt, common } => {
            load_config(&common, overrides)?;
            gradcheck(&seeds, corrupt.as_deref())
        }
        Command::InspectAlign { ta, j, sigma, window, csv, common } => {
            let cfg = load_config(&common, overrides)?;
            inspect_align(
                &cfg,
                ta.unwrap_or(cfg.data.audio_frames),
                j.unwrap_or(cfg.data.visual_frames),
                sigma.unwrap_or(cfg.distill.sigma),
                window.unwrap_or(cfg.distill.window),
                csv,
            )
        }
    }
}

//! Command-line front end: bank extraction, training runs, evaluation and
//! ablation sweeps, all reproducible from one flat config file.
//!
//! Exit codes: 0 success, 1 config or runtime failure, 2 usage error.

mod config;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use clip_ping_core::{
    class_prototypes, embed_split, extract_features, generate_dataset, linear_probe, recall_at_k,
    similarity_matrix, train, write_bank, write_bank_with_dtype, BankDtype, Checkpoint,
    GuidanceSource, Method, MetricRow, Modality, PairedDataset, RunLog, Split, TrainOutput,
    zero_shot_top1,
};
use config::RunConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "clip-ping", version, about = "Contrastive training with frozen-teacher neighbour guidance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract frozen teacher features for one modality into a bank file.
    Extract {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_modality)]
        modality: Modality,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run and write checkpoint, run log and manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_method)]
        method: Method,
        /// Training seed; defaults to the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a finished run directory on one split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_parser = parse_eval_split)]
        split: Split,
        /// Comma-separated recall cutoffs.
        #[arg(long, default_value = "1,5,10")]
        k: String,
    },
    /// Sweep one parameter over a value list and a seed range.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long)]
        values: String,
        #[arg(long)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|_| {
        format!("unknown method '{s}'; supported: clip, clip-ping, a-clip-ping, clip-f, clip-d")
    })
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    s.parse()
        .map_err(|_| format!("unknown modality '{s}'; supported: image, text"))
}

fn parse_eval_split(s: &str) -> Result<Split, String> {
    match s {
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split '{other}'; supported: val, test")),
    }
}

/// Marks errors that should exit with the usage code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Serialize, Deserialize)]
struct ArtifactPaths {
    checkpoint: String,
    runlog: String,
    metrics: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    bank_image: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    bank_text: Option<String>,
}

/// Everything needed to reproduce and evaluate a run. `config_raw` is the
/// input config file byte for byte.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    tool_version: String,
    method: String,
    seed: u64,
    config_raw: String,
    artifacts: ArtifactPaths,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Extract {
            config,
            modality,
            out,
        } => run_extract(&config, modality, &out),
        Command::Train {
            config,
            method,
            seed,
            out,
        } => run_train(&config, method, seed, &out),
        Command::Eval { run, split, k } => run_eval(&run, split, &k),
        Command::Ablate {
            config,
            param,
            values,
            seeds,
            out,
        } => run_ablate(&config, &param, &values, seeds, &out),
    }
}

fn run_extract(config_path: &Path, modality: Modality, out: &Path) -> Result<()> {
    let (cfg, _raw) = RunConfig::from_file(config_path)?;
    let dataset = generate_dataset(&cfg.gen_config())?;
    let (teacher_image, teacher_text) = cfg.teachers()?;
    let teacher = match modality {
        Modality::Image => teacher_image,
        Modality::Text => teacher_text,
    };
    let bank = extract_features(&teacher, &dataset, modality)?;
    write_bank(out, &bank)?;
    println!(
        "wrote {} {} features of width {} to {}",
        bank.len(),
        modality.as_str(),
        bank.dim(),
        out.display()
    );
    Ok(())
}

fn guidance_for(
    method: Method,
    cfg: &RunConfig,
    dataset: &PairedDataset,
) -> Result<GuidanceSource> {
    let (teacher_image, teacher_text) = cfg.teachers()?;
    Ok(match method {
        Method::Clip => GuidanceSource::None,
        Method::ClipPing | Method::ClipF => GuidanceSource::Banks {
            image: extract_features(&teacher_image, dataset, Modality::Image)?,
            text: extract_features(&teacher_text, dataset, Modality::Text)?,
        },
        Method::AClipPing | Method::ClipD => GuidanceSource::Teachers {
            image: teacher_image,
            text: teacher_text,
        },
    })
}

fn run_train(config_path: &Path, method: Method, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let (cfg, raw) = RunConfig::from_file(config_path)?;
    let seed = seed.unwrap_or(cfg.seed);
    let train_config = cfg.train_config(method, seed)?;
    let dataset = generate_dataset(&cfg.gen_config())?;
    let guidance = guidance_for(method, &cfg, &dataset)?;
    let output = train(&train_config, &dataset, &guidance)?;

    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create run directory {}", out_dir.display()))?;
    let ckpt = Checkpoint::from_output(&output);
    ckpt.write(&out_dir.join("checkpoint.pingckpt"))?;
    std::fs::write(out_dir.join("runlog.csv"), output.run_log.to_csv())?;
    // The metrics file starts as a bare header; `eval` fills it in.
    std::fs::write(
        out_dir.join("metrics.csv"),
        format!("{}\n", MetricRow::csv_header()),
    )?;
    let mut artifacts = ArtifactPaths {
        checkpoint: "checkpoint.pingckpt".into(),
        runlog: "runlog.csv".into(),
        metrics: "metrics.csv".into(),
        bank_image: None,
        bank_text: None,
    };
    if method != Method::Clip {
        // Full-precision copies of the frozen features the run was guided by.
        let (teacher_image, teacher_text) = cfg.teachers()?;
        let bank_image = extract_features(&teacher_image, &dataset, Modality::Image)?;
        let bank_text = extract_features(&teacher_text, &dataset, Modality::Text)?;
        write_bank_with_dtype(&out_dir.join("bank_image.pingfb"), &bank_image, BankDtype::F64)?;
        write_bank_with_dtype(&out_dir.join("bank_text.pingfb"), &bank_text, BankDtype::F64)?;
        artifacts.bank_image = Some("bank_image.pingfb".into());
        artifacts.bank_text = Some("bank_text.pingfb".into());
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        method: method.as_str().to_string(),
        seed,
        config_raw: raw,
        artifacts,
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    let last = output
        .run_log
        .epochs
        .last()
        .expect("training always logs at least one epoch");
    println!(
        "trained {} seed {seed}: final loss {:.6}, 1/tau {:.3}, artifacts in {}",
        method.as_str(),
        last.loss_total,
        last.inv_tau,
        out_dir.display()
    );
    Ok(())
}

struct EvalSummary {
    rows: Vec<MetricRow>,
}

fn evaluate_run(
    output: &TrainOutput,
    dataset: &PairedDataset,
    method: Method,
    seed: u64,
    split: Split,
    ks: &[usize],
    probe: Option<&clip_ping_core::ProbeConfig>,
) -> Result<EvalSummary> {
    let (zi, zt, labels, _) = embed_split(
        &output.image_encoder,
        &output.text_encoder,
        dataset,
        split,
    )?;
    let mut rows = Vec::new();
    let sim = similarity_matrix(&zi, &zt, 1.0)?;
    for &k in ks {
        let r = recall_at_k(&sim, k)?;
        rows.push(MetricRow {
            method: method.as_str().into(),
            seed,
            split: split.as_str().into(),
            metric: "i2t_recall".into(),
            k,
            value: r.i2t_at_k,
        });
        rows.push(MetricRow {
            method: method.as_str().into(),
            seed,
            split: split.as_str().into(),
            metric: "t2i_recall".into(),
            k,
            value: r.t2i_at_k,
        });
    }
    let protos = class_prototypes(&output.text_encoder, dataset)?;
    let zs = zero_shot_top1(&zi, &protos, &labels)?;
    rows.push(MetricRow {
        method: method.as_str().into(),
        seed,
        split: split.as_str().into(),
        metric: "zero_shot_top1".into(),
        k: 1,
        value: zs,
    });
    if let Some(probe_cfg) = probe {
        let (train_zi, _, train_labels, _) = embed_split(
            &output.image_encoder,
            &output.text_encoder,
            dataset,
            Split::Train,
        )?;
        let acc = linear_probe(&train_zi, &train_labels, &zi, &labels, probe_cfg)?;
        rows.push(MetricRow {
            method: method.as_str().into(),
            seed,
            split: split.as_str().into(),
            metric: "linear_probe_top1".into(),
            k: 1,
            value: acc,
        });
    }
    Ok(EvalSummary { rows })
}

fn run_eval(run_dir: &Path, split: Split, k_list: &str) -> Result<()> {
    let manifest_path = run_dir.join("manifest.json");
    let manifest: RunManifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path)
            .with_context(|| format!("cannot read {}", manifest_path.display()))?,
    )
    .with_context(|| format!("cannot parse {}", manifest_path.display()))?;
    let cfg: RunConfig = serde_json::from_str(&manifest.config_raw)
        .context("manifest carries an invalid config snapshot")?;
    let method: Method = manifest
        .method
        .parse()
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let ks: Vec<usize> = k_list
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| UsageError(format!("invalid recall cutoff '{s}'")).into())
        })
        .collect::<Result<_>>()?;
    let dataset = generate_dataset(&cfg.gen_config())?;
    let ckpt = Checkpoint::read(&run_dir.join(&manifest.artifacts.checkpoint))?;
    let output = TrainOutput {
        image_encoder: ckpt.image_encoder,
        text_encoder: ckpt.text_encoder,
        adapters: ckpt.adapters,
        temperature: ckpt.temperature,
        run_log: RunLog {
            method,
            seed: manifest.seed,
            epochs: Vec::new(),
            step_traces: Vec::new(),
        },
    };
    let probe_cfg = cfg.probe_config(manifest.seed);
    let summary = evaluate_run(
        &output,
        &dataset,
        method,
        manifest.seed,
        split,
        &ks,
        Some(&probe_cfg),
    )?;
    let mut csv = format!("{}\n", MetricRow::csv_header());
    for row in &summary.rows {
        csv.push_str(&row.to_csv());
        csv.push('\n');
        println!("{}", row.to_csv());
    }
    std::fs::write(run_dir.join(&manifest.artifacts.metrics), csv)?;
    Ok(())
}

fn apply_ablation(cfg: &mut RunConfig, param: &str, value: &str) -> Result<()> {
    let bad_value = |p: &str, v: &str| -> anyhow::Error {
        UsageError(format!("invalid value '{v}' for parameter '{p}'")).into()
    };
    match param {
        "alpha" => cfg.alpha = value.parse().map_err(|_| bad_value(param, value))?,
        "lambda" => cfg.lambda = value.parse().map_err(|_| bad_value(param, value))?,
        "queue" => cfg.capacity = value.parse().map_err(|_| bad_value(param, value))?,
        "topk" => cfg.top_k = value.parse().map_err(|_| bad_value(param, value))?,
        "proj_dim" => cfg.proj_dim = value.parse().map_err(|_| bad_value(param, value))?,
        "update" => {
            value
                .parse::<clip_ping_core::UpdateStrategy>()
                .map_err(|_| bad_value(param, value))?;
            cfg.update_strategy = value.to_string();
        }
        "mask" => {
            value
                .parse::<clip_ping_core::ModalityMask>()
                .map_err(|_| bad_value(param, value))?;
            cfg.modality_mask = value.to_string();
        }
        other => {
            return Err(UsageError(format!(
                "unknown ablation parameter '{other}'; supported: alpha, lambda, queue, topk, proj_dim, update, mask"
            ))
            .into());
        }
    }
    Ok(())
}

fn run_ablate(
    config_path: &Path,
    param: &str,
    values: &str,
    seeds: u64,
    out: &Path,
) -> Result<()> {
    if seeds == 0 {
        return Err(UsageError("--seeds must be at least 1".into()).into());
    }
    let (base_cfg, _raw) = RunConfig::from_file(config_path)?;
    let method: Method = base_cfg
        .method
        .parse()
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let value_list: Vec<&str> = values.split(',').map(str::trim).collect();
    if value_list.is_empty() {
        return Err(UsageError("--values must list at least one value".into()).into());
    }
    // Validate every value up front so a typo fails before any training.
    for v in &value_list {
        let mut probe = base_cfg.clone();
        apply_ablation(&mut probe, param, v)?;
    }
    let dataset = generate_dataset(&base_cfg.gen_config())?;
    let mut csv = String::from("param,value,seed,method,i2t_at_1,t2i_at_1,zero_shot_top1\n");
    for v in &value_list {
        let mut cfg = base_cfg.clone();
        apply_ablation(&mut cfg, param, v)?;
        for seed in 0..seeds {
            let train_config = cfg.train_config(method, seed)?;
            let guidance = guidance_for(method, &cfg, &dataset)?;
            let output = train(&train_config, &dataset, &guidance)?;
            let summary =
                evaluate_run(&output, &dataset, method, seed, Split::Test, &[1], None)?;
            let find = |name: &str| {
                summary
                    .rows
                    .iter()
                    .find(|r| r.metric == name)
                    .map(|r| r.value)
                    .expect("metric row present")
            };
            csv.push_str(&format!(
                "{param},{v},{seed},{},{},{},{}\n",
                method.as_str(),
                find("i2t_recall"),
                find("t2i_recall"),
                find("zero_shot_top1"),
            ));
            println!("{param}={v} seed={seed} done");
        }
    }
    std::fs::write(out, csv)?;
    println!(
        "wrote {} result groups to {}",
        value_list.len() * seeds as usize,
        out.display()
    );
    Ok(())
}

use std::io::Write;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use msd_core::bench::{run_bench, BenchRun};
use msd_core::datagen::{gen_text_corpus, gen_visual_corpus, is_held_out, write_jsonl};
use msd_core::draft::{DraftMode, DraftParams};
use msd_core::engine::{write_traces_jsonl, DecodeMode, SpecConfig};
use msd_core::lossless::{certify, default_grid};
use msd_core::pretrain::{pretrain_target, PretrainConfig};
use msd_core::rng::derive_seed;
use msd_core::trainer::{mean_loss, prepare_examples, train_two_stage, write_loss_csv, Strategy, TrainConfig};
use msd_core::verifier::AcceptanceRule;
use msd_core::weights::WeightFile;

use crate::artifacts::{self, header, Manifest, MANIFEST_FILE, TEXT_FILE, VISUAL_FILE};
use crate::{streams, AssertionFailure, BenchArgs, BenchMode, Cli, Command, GenDataArgs, LosslessArgs, ModeArg, PretrainArgs, RuleArg, TrainArgs};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(args) => gen_data(cli.seed, args),
        Command::PretrainTarget(args) => pretrain(cli.seed, args),
        Command::Train(args) => train(cli.seed, args),
        Command::Bench(args) => bench(cli.seed, args),
        Command::VerifyLossless(args) => verify_lossless(cli.seed, args),
        Command::Report(args) => crate::report::report(cli.seed, args),
    }
}

fn gen_data(seed: u64, args: &GenDataArgs) -> Result<()> {
    let files = [TEXT_FILE, VISUAL_FILE, MANIFEST_FILE].map(|f| args.out.join(f));
    if !args.force {
        if let Some(existing) = files.iter().find(|p| p.exists()) {
            bail!("{} already exists (pass --force to overwrite)", existing.display());
        }
    }
    let grammar_seed = derive_seed(seed, streams::GRAMMAR);
    let text = gen_text_corpus(args.count, grammar_seed, derive_seed(seed, streams::TEXT))?;
    let visual = gen_visual_corpus(args.count, args.side, grammar_seed, derive_seed(seed, streams::VISUAL))?;
    let held = |stream: u64| -> Vec<usize> {
        let split = derive_seed(seed, stream);
        (0..args.count).filter(|&i| is_held_out(split, i)).collect()
    };
    let manifest = Manifest {
        header: header("gen-data", seed, args)?,
        grammar_seed,
        text_count: text.len(),
        visual_count: visual.len(),
        held_out_text: held(streams::TEXT_SPLIT),
        held_out_visual: held(streams::VISUAL_SPLIT),
    };
    let mut out = artifacts::create(&files[0])?;
    write_jsonl(&text, &mut out)?;
    out.flush()?;
    let mut out = artifacts::create(&files[1])?;
    write_jsonl(&visual, &mut out)?;
    out.flush()?;
    artifacts::write_json(&files[2], &manifest)?;
    println!(
        "wrote {} text and {} visual examples ({} / {} held out) to {}",
        text.len(),
        visual.len(),
        manifest.held_out_text.len(),
        manifest.held_out_visual.len(),
        args.out.display()
    );
    Ok(())
}

fn pretrain(seed: u64, args: &PretrainArgs) -> Result<()> {
    let mut config: PretrainConfig = match &args.config {
        Some(path) => artifacts::read_json(path)?,
        None => PretrainConfig::default(),
    };
    config.seed = derive_seed(seed, streams::PRETRAIN);
    let corpus = artifacts::load_corpus(&args.data)?;
    let (target, report) = pretrain_target(
        &config,
        &corpus.text_train,
        &corpus.visual_train,
        &corpus.visual_held_out,
        |e| {
            eprintln!(
                "epoch {:>2}{} loss {:.4} held-out cell accuracy {:.3}",
                e.epoch,
                if e.warmup { " (warm-up)" } else { "" },
                e.loss,
                e.cell_accuracy
            )
        },
    )?;
    let mut meta = header("pretrain-target", seed, &config)?;
    meta["report"] = serde_json::to_value(&report)?;
    let file = WeightFile {
        target: Some(target),
        draft: None,
        meta,
    };
    artifacts::write_file(&args.out, &file.to_bytes()?)?;
    println!(
        "target reached held-out cell accuracy {:.3} after {} epochs; wrote {}",
        report.final_cell_accuracy,
        report.epochs.len(),
        args.out.display()
    );
    Ok(())
}

fn draft_mode(arg: ModeArg) -> DraftMode {
    match arg {
        ModeArg::Decoupled => DraftMode::Decoupled,
        ModeArg::BaselineConcat => DraftMode::BaselineConcat,
    }
}

pub fn arm_label(mode: DraftMode, strategy: Strategy) -> String {
    let mode = match mode {
        DraftMode::Decoupled => "decoupled",
        DraftMode::BaselineConcat => "baseline-concat",
    };
    format!("{mode}/{strategy}")
}

fn train(seed: u64, args: &TrainArgs) -> Result<()> {
    let mut config: TrainConfig = match &args.config {
        Some(path) => artifacts::read_json(path)?,
        None => TrainConfig::default(),
    };
    if let Some(mode) = args.mode {
        config.draft.mode = draft_mode(mode);
    }
    if let Some(s) = &args.strategy {
        config.strategy = s.parse()?;
    }
    config.seed = derive_seed(seed, streams::TRAIN);
    config.draft.seed = derive_seed(seed, streams::DRAFT_INIT);

    let (target, _) = artifacts::read_target(&args.target)?;
    let corpus = artifacts::load_corpus(&args.data)?;
    let text = prepare_examples(&target, &corpus.text_train)?;
    let visual = prepare_examples(&target, &corpus.visual_train)?;
    let label = arm_label(config.draft.mode, config.strategy);
    let (draft, curve) = train_two_stage(&target, &text, &visual, &config, |e| {
        eprintln!(
            "{label} epoch {:>2} stage {} text {:.3} loss {:.5}",
            e.epoch, e.stage, e.text_fraction, e.mean_loss
        )
    })?;

    let held_text = prepare_examples(&target, &corpus.text_held_out)?;
    let held_visual = prepare_examples(&target, &corpus.visual_held_out)?;
    let init = DraftParams::new(&target, &config.draft);
    let held_out = json!({
        "text": mean_loss(&draft, &target, &held_text, config.w)?,
        "visual": mean_loss(&draft, &target, &held_visual, config.w)?,
        "text_at_init": mean_loss(&init, &target, &held_text, config.w)?,
        "visual_at_init": mean_loss(&init, &target, &held_visual, config.w)?,
    });
    eprintln!("{label} held-out loss {held_out}");

    let mut meta = header("train", seed, &config)?;
    meta["arm"] = json!(label);
    meta["held_out_loss"] = held_out;
    // Epochs whose source set was smaller than the epoch and had to be drawn with replacement.
    meta["resampled_epochs"] = json!(curve.iter().filter(|r| r.with_replacement).map(|r| r.epoch).collect::<Vec<_>>());
    let file = WeightFile {
        target: None,
        draft: Some((config.draft.clone(), draft)),
        meta: meta.clone(),
    };
    artifacts::write_file(&args.out, &file.to_bytes()?)?;
    let csv_path = args.loss_csv.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    let mut out = artifacts::create(&csv_path)?;
    artifacts::csv_preamble(&mut out, &meta)?;
    write_loss_csv(&curve, &mut out)?;
    out.flush()?;
    let last = curve.last().map_or(f64::NAN, |e| e.mean_loss);
    println!("{label}: final loss {last:.5}; wrote {} and {}", args.out.display(), csv_path.display());
    Ok(())
}

#[derive(Serialize)]
struct ExampleRow {
    index: usize,
    tokens: usize,
    cycles: usize,
    output: Vec<usize>,
}

/// Timing-free run summary; wall-clock figures go to `timing.json`.
fn run_json(run: &BenchRun) -> Value {
    let mut metrics = json!(run.metrics);
    if let Some(m) = metrics.as_object_mut() {
        m.remove("t_q");
        m.remove("t_v");
    }
    json!({
        "decode": run.spec,
        "greedy_checked": run.greedy_checked,
        "metrics": metrics,
        "examples": run.examples.iter().map(|e| ExampleRow {
            index: e.index,
            tokens: e.counts.tokens,
            cycles: e.counts.cycles,
            output: e.output.clone(),
        }).collect::<Vec<_>>(),
    })
}

pub const METRICS_CSV_HEADER: &str = "arm,decode,temperature,examples,tau,tau_accepted,alpha_1,alpha_2,alpha_3,alpha_4,cycles,tokens";

fn csv_row(arm: &str, run: &BenchRun) -> String {
    let alphas: Vec<String> = (0..4)
        .map(|n| {
            run.metrics
                .n_alpha
                .as_ref()
                .and_then(|a| a.get(n).copied().flatten())
                .map_or(String::new(), |v| v.to_string())
        })
        .collect();
    format!(
        "{arm},{},{},{},{},{},{},{},{}",
        run.spec.mode.name(),
        run.spec.temperature,
        run.examples.len(),
        run.metrics.tau,
        run.metrics.tau_accepted,
        alphas.join(","),
        run.metrics.cycles,
        run.metrics.tokens
    )
}

fn bench(seed: u64, args: &BenchArgs) -> Result<()> {
    let (target, _) = artifacts::read_target(&args.target)?;
    let file = artifacts::read_weights(&args.draft, Some(&target))?;
    let (_, draft) = file
        .draft
        .with_context(|| format!("{} holds no draft weights", args.draft.display()))?;
    let arm = file.meta.get("arm").and_then(Value::as_str).unwrap_or("unlabelled").to_string();
    let corpus = artifacts::load_corpus(&args.data)?;
    if corpus.visual_held_out.len() < args.count {
        bail!(
            "only {} held-out visual examples, {} requested",
            corpus.visual_held_out.len(),
            args.count
        );
    }
    let examples = &corpus.visual_held_out[..args.count];
    let modes = match args.mode {
        BenchMode::Chain => vec![DecodeMode::Chain { gamma: args.gamma }],
        BenchMode::Tree => vec![DecodeMode::Tree { plan: args.tree_plan.clone() }],
        BenchMode::Both => vec![
            DecodeMode::Chain { gamma: args.gamma },
            DecodeMode::Tree { plan: args.tree_plan.clone() },
        ],
    };
    let decode_seed = derive_seed(seed, streams::BENCH);
    let mut runs = Vec::new();
    for mode in modes {
        let spec = SpecConfig {
            mode,
            temperature: args.temperature,
            max_tokens: args.max_tokens,
            rule: AcceptanceRule::Standard,
        };
        let run = run_bench(&target, &draft, examples, &spec, decode_seed)?;
        eprintln!("{arm} {}: tau {:.3}", spec.mode.name(), run.metrics.tau);
        runs.push(run);
    }

    let mut doc = header("bench", seed, args)?;
    doc["arm"] = json!(arm);
    doc["draft_meta"] = file.meta.clone();
    doc["runs"] = runs.iter().map(run_json).collect();
    artifacts::write_json(&args.out.join("metrics.json"), &doc)?;

    let mut csv = artifacts::create(&args.out.join("metrics.csv"))?;
    artifacts::csv_preamble(&mut csv, &header("bench", seed, args)?)?;
    writeln!(csv, "{METRICS_CSV_HEADER}")?;
    for run in &runs {
        writeln!(csv, "{}", csv_row(&arm, run))?;
    }
    csv.flush()?;

    for run in &runs {
        let mut out = artifacts::create(&args.out.join(format!("traces-{}.jsonl", run.spec.mode.name())))?;
        write_traces_jsonl(&run.traces(), &mut out)?;
        out.flush()?;
    }
    let timing: Vec<Value> = runs
        .iter()
        .map(|r| json!({"decode": r.spec.mode.name(), "timing": r.timing}))
        .collect();
    artifacts::write_json(&args.out.join("timing.json"), &json!({"version": artifacts::VERSION, "runs": timing}))?;
    for run in &runs {
        println!("{}", csv_row(&arm, run));
    }
    Ok(())
}

fn verify_lossless(seed: u64, args: &LosslessArgs) -> Result<()> {
    let rule = match args.rule {
        RuleArg::Standard => AcceptanceRule::Standard,
        RuleArg::UncappedRatio => AcceptanceRule::UncappedRatio,
    };
    let grid = default_grid(args.seeds);
    let report = certify(&grid, rule)?;
    if let Some(path) = &args.out {
        let mut doc = header("verify-lossless", seed, json!({"rule": rule, "seeds": args.seeds}))?;
        doc["report"] = serde_json::to_value(&report)?;
        artifacts::write_json(path, &doc)?;
    }
    let failed = report.instances.iter().filter(|r| !r.passed()).count();
    let improper = report.instances.iter().filter(|r| r.violation.is_some()).count();
    println!(
        "{} instances, max TV {:.3e} (tolerance {:.0e}), {} with improper acceptance probabilities, {} failed",
        report.instance_count, report.max_tv, report.tolerance, improper, failed
    );
    if !report.passed {
        return Err(AssertionFailure(format!("losslessness certification failed on {failed} instances")).into());
    }
    println!("PASS");
    Ok(())
}

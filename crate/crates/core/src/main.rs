use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use apn::checkpoint::{self, Checkpoint};
use apn::config::RunConfig;
use apn::continual::{adapt_online, run_arm, run_protocol};
use apn::data::{self, synthesize_domain_b, CharVocab, DomainSplit};
use apn::model::{param_counts, FfnKind, ModelState};
use apn::monitor::monitor;
use apn::tensor::Real;
use apn::train::{evaluate_ppl, retain_freed_memory, rng_for, streams, train_offline, EvalSpec, Record};

#[derive(Parser)]
#[command(name = "apn", version, about = "Attractor Patch Network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    /// Checkpoint for adapt, eval and monitor.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(Clone, Copy, Subcommand)]
enum Command {
    /// Pretrain on the domain A corpus.
    Train,
    /// Adapt a checkpoint online on synthesized domain B.
    Adapt,
    /// Perplexity of a checkpoint on each split.
    Eval,
    /// Two-domain continual-learning protocol for every arm.
    Protocol,
    /// Routing and residual diagnostics.
    Monitor,
    /// Matched-iteration dense vs APN training.
    Bench,
    /// Write the synthetic domain B corpus.
    SynthDomainB,
}

fn main() -> ExitCode {
    retain_freed_memory();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<apn::Error>())
        .map_or(1, |e| if e.is_input_error() { 2 } else { 1 })
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(p) = cli.precision {
        cfg.precision = match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        };
    }
    if let Some(c) = &cli.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    cfg.resolve_seed();
    match cfg.precision {
        64 => dispatch::<f64>(cli.command, cfg),
        _ => dispatch::<f32>(cli.command, cfg),
    }
}

fn dispatch<F: Real>(cmd: Command, cfg: RunConfig) -> Result<()> {
    match cmd {
        Command::Train => cmd_train::<F>(cfg),
        Command::Adapt => cmd_adapt::<F>(cfg),
        Command::Eval => cmd_eval::<F>(cfg),
        Command::Protocol => cmd_protocol::<F>(cfg),
        Command::Monitor => cmd_monitor::<F>(cfg),
        Command::Bench => cmd_bench::<F>(cfg),
        Command::SynthDomainB => cmd_synth::<F>(cfg),
    }
}

/// Creates the output directory and writes the resolved configuration.
fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write(&cfg.out.join("config.toml"), &cfg.to_toml()?)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn corpus(cfg: &RunConfig) -> Result<(CharVocab, DomainSplit)> {
    let path = cfg.corpus()?;
    data::ingest_file(path, cfg.data.val_fraction).map_err(|e| match e {
        apn::Error::Data(m) => apn::Error::Data(format!("data.corpus: {m}")).into(),
        other => other.into(),
    })
}

/// Domain A from the corpus, checked against the checkpoint vocabulary.
fn corpus_for(cfg: &RunConfig, vocab: &CharVocab) -> Result<Option<DomainSplit>> {
    if cfg.data.corpus.is_none() {
        return Ok(None);
    }
    let (v, a) = corpus(cfg)?;
    if &v != vocab {
        return Err(apn::Error::Data("data.corpus: vocabulary differs from the checkpoint's".into()).into());
    }
    Ok(Some(a))
}

fn load_checkpoint<F: Real>(cfg: &RunConfig) -> Result<Checkpoint<F>> {
    let path = cfg.checkpoint()?;
    Ok(checkpoint::load::<F>(path).with_context(|| format!("loading {}", path.display()))?)
}

fn progress_printer(label: String) -> impl FnMut(&Record) {
    let start = Instant::now();
    move |r: &Record| {
        let mut line = format!("[{label}] step {:>5} {:>7.1}s", r.step, start.elapsed().as_secs_f64());
        if let Some(l) = r.train_loss {
            let _ = write!(line, " loss {l:.4}");
        }
        if let Some(v) = r.val_ppl {
            let _ = write!(line, " val_ppl {v:.4}");
        }
        eprintln!("{line}");
    }
}

fn cmd_train<F: Real>(mut cfg: RunConfig) -> Result<()> {
    let (vocab, a) = corpus(&cfg)?;
    cfg.model.vocab_size = vocab.len();
    cfg.model.validate()?;
    cfg.train.validate()?;
    prepare_out(&cfg)?;
    let init = ModelState::<F>::init(&cfg.model, &mut rng_for(cfg.train.seed, streams::INIT))?;
    let mut cb = progress_printer("train".into());
    let out = train_offline(init, &a.train, &a.val, &cfg.train, Some(&mut cb))?;
    checkpoint::save(
        &cfg.out.join("best.ckpt"),
        &Checkpoint {
            state: out.best,
            vocab: vocab.clone(),
            optimizer: None,
        },
    )?;
    checkpoint::save(
        &cfg.out.join("last.ckpt"),
        &Checkpoint {
            state: out.last,
            vocab,
            optimizer: Some(out.optimizer),
        },
    )?;
    write(&cfg.out.join("train.log"), &out.history.to_log())?;
    write(&cfg.out.join("metrics.csv"), &out.history.to_csv())?;
    if let Some(best) = out.best_val_ppl {
        println!("best_val_ppl={best:.17e}");
    }
    Ok(())
}

fn protocol_spec(cfg: &RunConfig) -> EvalSpec {
    EvalSpec {
        batches: cfg.protocol.eval_batches,
        batch_size: cfg.protocol.eval_batch_size,
        context: cfg.adapt.context,
        seed: cfg.protocol.eval_seed,
    }
}

fn cmd_adapt<F: Real>(cfg: RunConfig) -> Result<()> {
    let ck = load_checkpoint::<F>(&cfg)?;
    let b = synthesize_domain_b(&ck.vocab, cfg.protocol.domain_b_seed, cfg.protocol.domain_b_tokens)?;
    let a = corpus_for(&cfg, &ck.vocab)?;
    prepare_out(&cfg)?;
    let (state, summary, trace) = match &a {
        Some(a) => {
            let (report, state) = run_arm("adapt", &ck.state, a, &b, &cfg.adapt, &cfg.protocol)?;
            let summary = format!(
                "pre_a_ppl={:.17e}\npre_b_ppl={:.17e}\nretention_ppl={:.17e}\nadaptation_ppl={:.17e}\nupdated_params={}\ntotal_params={}\n",
                report.pre_a, report.pre_b, report.retention, report.adaptation, report.updated_params, report.total_params
            );
            (state, summary, report.trace)
        }
        None => {
            let spec = protocol_spec(&cfg);
            let mut state = ck.state.clone();
            let pre_b = evaluate_ppl(&state, &b.val, &spec)?;
            let trace = adapt_online(&mut state, &b.train, &cfg.adapt)?;
            let post_b = evaluate_ppl(&state, &b.val, &spec)?;
            let summary = format!(
                "pre_b_ppl={pre_b:.17e}\nadaptation_ppl={post_b:.17e}\nupdated_params={}\ntotal_params={}\n",
                trace.updated_params,
                state.param_count()
            );
            (state, summary, trace)
        }
    };
    let mut log = String::new();
    for (i, l) in trace.losses.iter().enumerate() {
        let _ = writeln!(log, "step={i} loss={l:.17e}");
    }
    let _ = writeln!(
        log,
        "update_steps={} applied={} gated_out={} skipped_nonfinite={:?} allocations={}",
        trace.update_steps,
        trace.applied,
        trace.gated_out,
        trace.skipped_nonfinite,
        trace.allocations.len()
    );
    write(&cfg.out.join("adapt.log"), &log)?;
    write(&cfg.out.join("adapt.txt"), &summary)?;
    checkpoint::save(
        &cfg.out.join("adapted.ckpt"),
        &Checkpoint {
            state,
            vocab: ck.vocab,
            optimizer: None,
        },
    )?;
    print!("{summary}");
    Ok(())
}

fn cmd_eval<F: Real>(cfg: RunConfig) -> Result<()> {
    let ck = load_checkpoint::<F>(&cfg)?;
    let spec = cfg.eval_spec();
    let mut rows = Vec::new();
    if let Some(a) = corpus_for(&cfg, &ck.vocab)? {
        rows.push(("a_train", evaluate_ppl(&ck.state, &a.train, &spec)?));
        rows.push(("a_val", evaluate_ppl(&ck.state, &a.val, &spec)?));
    }
    let b = synthesize_domain_b(&ck.vocab, cfg.protocol.domain_b_seed, cfg.protocol.domain_b_tokens)?;
    rows.push(("b_val", evaluate_ppl(&ck.state, &b.val, &spec)?));
    prepare_out(&cfg)?;
    let mut csv = String::from("split,ppl\n");
    for (name, ppl) in &rows {
        let _ = writeln!(csv, "{name},{ppl:.17e}");
        println!("{name} ppl={ppl:.6}");
    }
    write(&cfg.out.join("eval.csv"), &csv)
}

fn cmd_protocol<F: Real>(mut cfg: RunConfig) -> Result<()> {
    let (vocab, a) = corpus(&cfg)?;
    cfg.model.vocab_size = vocab.len();
    cfg.arms = cfg.protocol_arms();
    for arm in &mut cfg.arms {
        arm.model.vocab_size = vocab.len();
    }
    prepare_out(&cfg)?;
    let start = Instant::now();
    let mut cb = |arm: &str, r: &Record| {
        if let Some(v) = r.val_ppl {
            eprintln!("[{arm}] step {:>5} {:>7.1}s val_ppl {v:.4}", r.step, start.elapsed().as_secs_f64());
        }
    };
    let report = run_protocol::<F>(&vocab, &a, &cfg.arms, &cfg.protocol, Some(&mut cb))?;
    let table = report.to_table();
    write(&cfg.out.join("protocol.csv"), &report.to_csv())?;
    let mut txt = table.clone();
    txt.push_str("\n# config\n");
    txt.push_str(&cfg.to_toml()?);
    write(&cfg.out.join("protocol.txt"), &txt)?;
    print!("{table}");
    Ok(())
}

fn cmd_monitor<F: Real>(mut cfg: RunConfig) -> Result<()> {
    let (state, vocab) = match cfg.checkpoint {
        Some(_) => {
            let ck = load_checkpoint::<F>(&cfg)?;
            (ck.state, ck.vocab)
        }
        None => {
            let (vocab, _) = corpus(&cfg)?;
            cfg.model.vocab_size = vocab.len();
            let s = ModelState::<F>::init(&cfg.model, &mut rng_for(cfg.train.seed, streams::INIT))?;
            (s, vocab)
        }
    };
    let a = corpus_for(&cfg, &vocab)?.ok_or_else(|| apn::Error::Config("data.corpus: monitor needs a corpus".into()))?;
    let b = if cfg.monitor.cross_domain {
        Some(synthesize_domain_b(&vocab, cfg.protocol.domain_b_seed, cfg.protocol.domain_b_tokens)?)
    } else {
        None
    };
    prepare_out(&cfg)?;
    let report = monitor(
        &state,
        &a.val,
        b.as_ref().map(|b| b.val.as_slice()),
        &cfg.eval_spec(),
        cfg.monitor.layer,
        cfg.monitor.overlap_pairs,
    )?;
    let text = report.to_text();
    write(&cfg.out.join("monitor.txt"), &text)?;
    write(&cfg.out.join("monitor.csv"), &report.to_csv())?;
    print!("{text}");
    Ok(())
}

fn cmd_bench<F: Real>(mut cfg: RunConfig) -> Result<()> {
    let (vocab, a) = corpus(&cfg)?;
    cfg.model.vocab_size = vocab.len();
    prepare_out(&cfg)?;
    let mut csv = String::from("model,total_params,ffn_params,apn_core_params,apn_core_formula,best_val_ppl,final_val_ppl\n");
    let mut log = String::new();
    for ffn in [FfnKind::Dense, FfnKind::Apn] {
        let model = apn::model::ModelConfig { ffn, ..cfg.model.clone() };
        let name = format!("{ffn:?}").to_lowercase();
        let init = ModelState::<F>::init(&model, &mut rng_for(cfg.train.seed, streams::INIT))?;
        let counts = param_counts(&init);
        let formula = match ffn {
            FfnKind::Apn => model.n_layers * model.apn.core_param_count(model.d_model),
            _ => 0,
        };
        let start = Instant::now();
        let mut cb = progress_printer(name.clone());
        let out = train_offline(init, &a.train, &a.val, &cfg.train, Some(&mut cb))?;
        eprintln!("[{name}] trained in {:.1}s", start.elapsed().as_secs_f64());
        let last = out.history.val_points().last().map_or(f64::NAN, |p| p.1);
        let _ = writeln!(
            csv,
            "{name},{},{},{},{formula},{:.17e},{last:.17e}",
            counts.total,
            counts.ffn,
            counts.apn_core,
            out.best_val_ppl.unwrap_or(f64::NAN)
        );
        for line in out.history.to_log().lines() {
            let _ = writeln!(log, "model={name} {line}");
        }
    }
    write(&cfg.out.join("bench.csv"), &csv)?;
    write(&cfg.out.join("bench.log"), &log)?;
    print!("{csv}");
    Ok(())
}

fn cmd_synth<F: Real>(cfg: RunConfig) -> Result<()> {
    let vocab = match (&cfg.data.corpus, &cfg.checkpoint) {
        (Some(_), _) => corpus(&cfg)?.0,
        (None, Some(_)) => load_checkpoint::<F>(&cfg)?.vocab,
        (None, None) => return Err(apn::Error::Config("data.corpus: a corpus or checkpoint is needed for the vocabulary".into()).into()),
    };
    let b = synthesize_domain_b(&vocab, cfg.protocol.domain_b_seed, cfg.protocol.domain_b_tokens)?;
    prepare_out(&cfg)?;
    write(&cfg.out.join("domain_b.txt"), &data::domain_b_text(cfg.protocol.domain_b_seed, cfg.protocol.domain_b_tokens))?;
    let mut bin = Vec::new();
    data::write_split(&mut bin, &vocab, &b)?;
    fs::write(cfg.out.join("domain_b.bin"), bin)?;
    println!("domain B: {} train / {} val tokens ({})", b.train.len(), b.val.len(), b.source);
    Ok(())
}

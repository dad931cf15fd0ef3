//! The `tfx` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_override, parse_pairs, RunConfig};
use crate::error::{Error, Result};
use crate::harness::ablate::{ablate, summary_table, AblationGrid};
use crate::harness::checkpoint;
use crate::harness::data::{detokenize, tokenize_bytes, unigram_entropy_bits, Corpus};
use crate::harness::metrics::{write_records, MetricsSink};
use crate::harness::{evaluate, Trainer};
use crate::model::LanguageModel;
use crate::mtpim::draft_verify_decode;
use crate::scalar::{Precision, Scalar};
use crate::suite::{perturb, run_suite};

#[derive(Parser, Debug)]
#[command(name = "tfx", version, about = "Byte-level language model experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on the `data` corpus.
    Train(ConfigArgs),
    /// Held-out loss, perplexity and bits per byte of a checkpoint.
    Eval(ConfigArgs),
    /// Finite-difference gradient check of every parameter.
    Gradcheck(ConfigArgs),
    /// Train one run per cell of a module grid.
    Ablate {
        #[command(flatten)]
        args: ConfigArgs,
        /// Axes to sweep: residual, activation, mtpim, conv (comma separated) or `full`.
        #[arg(long, default_value = "residual")]
        grid: String,
    },
    /// Speculative greedy decoding from a checkpoint.
    Decode {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// key=value config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// key=value overrides applied after the file.
    overrides: Vec<String>,
}

const USAGE: &str =
    "usage: tfx <train|eval|gradcheck|ablate|decode> --config <file> [key=value ...]";

impl ConfigArgs {
    fn load(&self, base: RunConfig, required: bool) -> Result<RunConfig> {
        let mut pairs = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                parse_pairs(&text)?
            }
            None if required => {
                return Err(Error::Config(format!("a config file is required\n{USAGE}")))
            }
            None => Vec::new(),
        };
        for o in &self.overrides {
            pairs.push(parse_override(o)?);
        }
        base.with_pairs(&pairs)
    }
}

fn echo(cfg: &RunConfig) {
    println!("# effective config");
    print!("{}", cfg.render());
    println!("# end config");
}

/// Runs the command line and returns the process exit code: 0 on
/// success, 1 for usage and configuration errors, 2 for numeric failures.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => {
            let cfg = a.load(RunConfig::default(), true)?;
            echo(&cfg);
            with_precision(cfg.model.precision, TrainCmd(&cfg))
        }
        Command::Eval(a) => {
            let cfg = a.load(RunConfig::default(), true)?;
            echo(&cfg);
            let ckpt = cfg
                .checkpoint
                .clone()
                .ok_or_else(|| Error::Config("eval needs `checkpoint=<path>`".into()))?;
            let header = checkpoint::read_header(&ckpt)?;
            with_precision(header.model.precision, EvalCmd(&cfg, &ckpt))
        }
        Command::Gradcheck(a) => {
            let mut cfg = a.load(RunConfig::default(), false)?;
            cfg.model.precision = Precision::Double;
            echo(&cfg);
            gradcheck(&cfg)
        }
        Command::Ablate { args, grid } => {
            let cfg = args.load(RunConfig::default(), true)?;
            echo(&cfg);
            println!("# grid={grid}");
            with_precision(cfg.model.precision, AblateCmd(&cfg, &grid))
        }
        Command::Decode {
            args,
            prompt,
            max_new,
        } => {
            let cfg = args.load(RunConfig::default(), true)?;
            echo(&cfg);
            let ckpt = cfg
                .checkpoint
                .clone()
                .ok_or_else(|| Error::Config("decode needs `checkpoint=<path>`".into()))?;
            let header = checkpoint::read_header(&ckpt)?;
            with_precision(
                header.model.precision,
                DecodeCmd(&cfg, &ckpt, &prompt, max_new),
            )
        }
    }
}

/// A command body generic over the scalar type.
trait Generic {
    fn call<T: Scalar>(self) -> Result<()>;
}

fn with_precision(p: Precision, body: impl Generic) -> Result<()> {
    match p {
        Precision::Single => body.call::<f32>(),
        Precision::Double => body.call::<f64>(),
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("`data=<path>` is required".into()))?;
    let mut corpus = Corpus::from_file(data, cfg.train.heldout_frac)?;
    if let Some(h) = &cfg.heldout_data {
        corpus.heldout = tokenize_bytes(&std::fs::read(h)?);
    }
    Ok(corpus)
}

struct TrainCmd<'a>(&'a RunConfig);

impl Generic for TrainCmd<'_> {
    fn call<T: Scalar>(self) -> Result<()> {
        let cfg = self.0;
        let corpus = load_corpus(cfg)?;
        let mut trainer = match &cfg.resume {
            Some(p) => {
                let mut t = checkpoint::load::<T>(p)?;
                t.config.total_steps = cfg.train.total_steps;
                println!("# resumed from {} at step {}", p.display(), t.step);
                t
            }
            None => Trainer::new(
                LanguageModel::<T>::new(cfg.model.clone())?,
                cfg.train.clone(),
            )?,
        };
        let name = if trainer.step == 0 {
            "train".to_string()
        } else {
            format!("train-from-{}", trainer.step)
        };
        let mut sink =
            MetricsSink::to_files(&cfg.out, &name, trainer.model.config.n_depths)?.with_echo(true);
        println!("# parameters {}", trainer.model.store.num_scalars());
        trainer.run(&corpus, &mut sink, Some(&cfg.out.join("checkpoint.bin")))?;
        let held = trainer.evaluate(&corpus.heldout)?;
        println!(
            "# heldout loss_main {:.5} bits/byte {:.5} unigram entropy {:.5} bits/byte",
            held.loss_main,
            held.bits_per_byte,
            unigram_entropy_bits(&corpus.heldout)
        );
        Ok(())
    }
}

struct EvalCmd<'a>(&'a RunConfig, &'a Path);

impl Generic for EvalCmd<'_> {
    fn call<T: Scalar>(self) -> Result<()> {
        let (cfg, ckpt) = (self.0, self.1);
        let t = checkpoint::load::<T>(ckpt)?;
        let corpus = load_corpus(cfg)?;
        let e = evaluate(
            &t.model,
            &corpus.heldout,
            t.config.seq_len,
            cfg.train.eval_rows,
            cfg.train.shards,
        )?;
        println!("step={}", t.step);
        println!("rows={}", e.rows);
        println!("loss_total={}", e.loss_total);
        println!("loss_main={}", e.loss_main);
        for (j, l) in e.loss_mpt.iter().enumerate() {
            println!("loss_mpt_{}={l}", j + 1);
        }
        println!("perplexity={}", e.loss_main.exp());
        println!("bits_per_byte={}", e.bits_per_byte);
        println!(
            "unigram_entropy_bits={}",
            unigram_entropy_bits(&corpus.heldout)
        );
        Ok(())
    }
}

fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let mut model = LanguageModel::<f64>::new(cfg.model.clone())?;
    perturb(&mut model, cfg.model.seed);
    let entries = (cfg.gc_entries > 0).then_some(cfg.gc_entries);
    let seq_len = cfg.gc_seq_len.min(cfg.model.max_seq_len);
    let r = run_suite(
        &mut model,
        seq_len,
        cfg.gc_batch.max(1),
        entries,
        cfg.train.seed,
    )?;
    for (module, err) in &r.modules {
        println!("{module:<18} max_rel_err={err:.3e}");
    }
    let checked: usize = r.report.params.iter().map(|p| p.entries_checked).sum();
    println!("entries_checked={checked}");
    println!("max_rel_err={:.3e}", r.report.max_rel_err);
    if r.report.max_rel_err >= 1e-5 {
        return Err(Error::GradCheck(format!(
            "max relative error {:.3e}",
            r.report.max_rel_err
        )));
    }
    Ok(())
}

struct AblateCmd<'a>(&'a RunConfig, &'a str);

impl Generic for AblateCmd<'_> {
    fn call<T: Scalar>(self) -> Result<()> {
        let (cfg, grid) = (self.0, self.1);
        let corpus = load_corpus(cfg)?;
        let grid = AblationGrid::parse(grid, &cfg.model)?;
        let report = ablate::<T>(&cfg.model, &cfg.train, &grid, &corpus, Some(&cfg.out))?;
        print!("{}", summary_table(&report.cells));
        Ok(())
    }
}

struct DecodeCmd<'a>(&'a RunConfig, &'a Path, &'a str, usize);

impl Generic for DecodeCmd<'_> {
    fn call<T: Scalar>(self) -> Result<()> {
        let (cfg, ckpt, prompt, max_new) = (self.0, self.1, self.2, self.3);
        let model = checkpoint::load::<T>(ckpt)?.model;
        let out = draft_verify_decode(&model, &tokenize_bytes(prompt.as_bytes()), max_new)?;
        println!("{}", String::from_utf8_lossy(&detokenize(&out.tokens)?));
        write_records(&cfg.out.join("decode.jsonl"), &out.steps)?;
        println!(
            "# steps={} drafted={} accepted={} acceptance_rate={:.4}",
            out.steps.len(),
            out.drafted(),
            out.accepted(),
            out.acceptance_rate()
        );
        Ok(())
    }
}

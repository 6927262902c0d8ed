//! `isr`: train, decode, evaluate and inspect the reasoning model.
//!
//! Configuration precedence: preset, then `--config` file, then flags.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use isr_core::config::{ModelConfig, Strategy};
use isr_core::corpus::{load_corpus, make_synthetic_corpus, read_records, Corpus, Grammar};
use isr_core::experiment::{
    ablate, load_checkpoint, parse_values, plot_data, save_checkpoint, sweep, train, RunSummary,
    SweepAxis,
};
use isr_core::metrics::{evaluate, tokens};
use isr_core::model::Model;
use isr_core::visual_encoder::format_matrix;
use isr_core::{Error, Result};

#[derive(Parser)]
#[command(name = "isr", version, about = "Video-grounded dialog with iterative search and reasoning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        setup: Setup,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode answers with a trained checkpoint.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_parser = parse_strategy)]
        decode: Option<Strategy>,
        #[arg(long)]
        beam_width: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score hypotheses against references.
    Evaluate {
        /// `video_id<TAB>turn<TAB>text` lines.
        #[arg(long)]
        hyp: PathBuf,
        /// Same line format (repeat a key for several references), or a
        /// corpus `.jsonl` whose final answers serve as references.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        cider_d: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the path-search comparisons of one sample.
    TracePaths {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        sample: String,
        /// One JSON record per comparison; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Edge list of the reversed paths.
        #[arg(long)]
        edges: Option<PathBuf>,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        setup: Setup,
        /// `turns`, `p` or `I`.
        #[arg(long)]
        axis: SweepAxis,
        /// `a..b` (integers, inclusive) or a comma list.
        #[arg(long)]
        values: String,
        /// Directory for one two-column data file per metric.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate model variants.
    Ablate {
        #[command(flatten)]
        setup: Setup,
        #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [
            "full".to_string(), "no_text_encoder".into(), "single_attention".into(),
            "no_weight_matrix".into(), "no_visual_encoder".into(), "no_gate".into(),
        ])]
        variants: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the last joint weight matrix of one sample.
    DumpWeights {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        dialogs: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        chain_depth: usize,
    },
}

#[derive(Args)]
struct Setup {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory (`corpus.jsonl` plus `features/`) or a `.jsonl` file
    /// with `features/` beside it.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Setup {
    fn config(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => ModelConfig::from_file(path)?,
            None => ModelConfig::desk(),
        };
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn corpus_paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join("corpus.jsonl"), path.join("features"))
    } else {
        let dir = path.parent().unwrap_or(Path::new("."));
        (path.to_path_buf(), dir.join("features"))
    }
}

fn open_corpus(path: &Path, model: Option<&Model>, cfg: &ModelConfig) -> Result<Corpus> {
    let (records, features) = corpus_paths(path);
    load_corpus(&records, &features, model.map(|m| m.vocab.clone()), &cfg.caps)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn find<'c>(corpus: &'c Corpus, id: &str) -> Result<&'c isr_core::corpus::DialogSample> {
    corpus
        .find(id)
        .ok_or_else(|| Error::Input(format!("no sample with video_id `{id}`")))
}

fn summary_table(runs: &[(String, &RunSummary)]) -> String {
    let mut s = String::from("label\tbleu1\tbleu2\tbleu3\tbleu4\trouge_l\tcider\n");
    for (label, r) in runs {
        let b = r.report.bleu;
        s.push_str(&format!(
            "{label}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            b[0], b[1], b[2], b[3], r.report.rouge_l, r.report.cider
        ));
    }
    s
}

fn read_keyed(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let parts: Vec<&str> = line.splitn(3, '\t').collect();
            match parts.as_slice() {
                [id, turn, text] => Ok((format!("{id}\t{turn}"), text.to_string())),
                _ => Err(Error::Parse {
                    location: format!("{}:{}", path.display(), i + 1),
                    message: "expected video_id<TAB>turn<TAB>text".into(),
                }),
            }
        })
        .collect()
}

fn references(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let mut refs: BTreeMap<String, Vec<String>> = BTreeMap::new();
    if path.extension().is_some_and(|e| e == "jsonl") {
        for r in read_records(path)? {
            let last = r.turns.last().map(|t| t.answer.clone()).unwrap_or_default();
            refs.entry(format!("{}\t{}", r.video_id, r.turns.len())).or_default().push(last);
        }
    } else {
        for (k, v) in read_keyed(path)? {
            refs.entry(k).or_default().push(v);
        }
    }
    Ok(refs)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { setup, out } => {
            let cfg = setup.config()?;
            let corpus = open_corpus(&setup.corpus, None, &cfg)?;
            let mut model = Model::new(cfg, corpus.vocab.clone())?;
            let stdout = std::io::stdout();
            train(&mut model, &corpus.samples, |s| {
                let _ = writeln!(stdout.lock(), "epoch {}\tlr {:.3e}\tloss {:.6}", s.epoch, s.lr, s.mean_loss);
            })?;
            save_checkpoint(&model, &out)
        }
        Command::Generate {
            ckpt,
            corpus,
            decode,
            beam_width,
            max_len,
            seed,
            out,
        } => {
            let model = load_checkpoint(&ckpt)?;
            let corpus = open_corpus(&corpus, Some(&model), &model.config)?;
            let mut dc = model.config.decode;
            if let Some(s) = decode {
                dc.strategy = s;
            }
            if let Some(b) = beam_width {
                dc.beam_width = b;
            }
            if let Some(m) = max_len {
                dc.max_len = m;
            }
            if let Some(s) = seed {
                dc.seed = s;
            }
            dc.validate()?;
            let mut text = String::new();
            for s in &corpus.samples {
                let g = model.generate(s, &dc)?;
                text.push_str(&format!("{}\t{}\t{}\n", s.video_id, s.turns(), g.text));
            }
            emit(out.as_deref(), &text)
        }
        Command::Evaluate {
            hyp,
            reference,
            cider_d,
            out,
        } => {
            let hyps = read_keyed(&hyp)?;
            let refs = references(&reference)?;
            let mut cands = Vec::with_capacity(hyps.len());
            let mut rs = Vec::with_capacity(hyps.len());
            for (key, text) in hyps {
                let r = refs
                    .get(&key)
                    .ok_or_else(|| Error::Input(format!("no reference for `{}`", key.replace('\t', " turn "))))?;
                cands.push(tokens(&text));
                rs.push(r.iter().map(|x| tokens(x)).collect());
            }
            let report = evaluate(&cands, &rs, cider_d)?;
            let json = serde_json::to_string_pretty(&report).expect("report serialises");
            emit(out.as_deref(), &(json + "\n"))
        }
        Command::TracePaths {
            ckpt,
            corpus,
            sample,
            out,
            edges,
        } => {
            let model = load_checkpoint(&ckpt)?;
            if model.config.ablation.no_text_encoder {
                return Err(Error::Config("this checkpoint has no text encoder".into()));
            }
            let corpus = open_corpus(&corpus, Some(&model), &model.config)?;
            let g = model.generate(find(&corpus, &sample)?, &model.config.decode)?;
            let trace = g.trace.expect("text encoder present");
            let mut lines = trace.comparison_lines(&sample).join("\n");
            lines.push('\n');
            emit(out.as_deref(), &lines)?;
            if let Some(path) = edges {
                let mut e = trace.edge_list(&sample).join("\n");
                e.push('\n');
                emit(Some(&path), &e)?;
            }
            Ok(())
        }
        Command::Sweep {
            setup,
            axis,
            values,
            out,
        } => {
            let cfg = setup.config()?;
            let values = parse_values(&values)?;
            let corpus = open_corpus(&setup.corpus, None, &cfg)?;
            let rows = sweep(&cfg, &corpus, axis, &values)?;
            let labelled: Vec<_> = rows.iter().map(|r| (r.value.to_string(), &r.run)).collect();
            print!("{}", summary_table(&labelled));
            if let Some(dir) = out {
                fs::create_dir_all(&dir).map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?;
                for (metric, body) in plot_data(&rows) {
                    emit(Some(&dir.join(format!("{metric}.dat"))), &body)?;
                }
            }
            Ok(())
        }
        Command::Ablate { setup, variants, out } => {
            let cfg = setup.config()?;
            let corpus = open_corpus(&setup.corpus, None, &cfg)?;
            let runs = ablate(&cfg, &corpus, &variants)?;
            let labelled: Vec<_> = runs.iter().map(|r| (r.label.clone(), r)).collect();
            let table = summary_table(&labelled);
            print!("{table}");
            match out {
                Some(p) => emit(Some(&p), &table),
                None => Ok(()),
            }
        }
        Command::DumpWeights {
            ckpt,
            corpus,
            sample,
            out,
        } => {
            let model = load_checkpoint(&ckpt)?;
            let corpus = open_corpus(&corpus, Some(&model), &model.config)?;
            let g = model.generate(find(&corpus, &sample)?, &model.config.decode)?;
            let w = g.joint_weights.ok_or_else(|| {
                Error::Config("no joint weight matrix: visual encoder removed or zero iterations".into())
            })?;
            emit(out.as_deref(), &format_matrix(&w))
        }
        Command::Synth {
            out,
            dialogs,
            seed,
            chain_depth,
        } => {
            let grammar = Grammar {
                chain_depth,
                max_history: Grammar::default().max_history.max(chain_depth),
                ..Grammar::default()
            };
            make_synthetic_corpus(seed, dialogs, &grammar)?.write(&out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

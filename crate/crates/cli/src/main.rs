use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaparse::conllu::Split;
use adaparse::cpg::{feature_weight_report, write_langvec_tsv, CpgError, LangVecMode};
use adaparse::harness::{
    bootstrap_significance, evaluate, load_model, parse_file, read_treebank, save_model, train, Model, TrainConfig,
};
use adaparse::typology::{load_typology, TypologyTable};
use adaparse::{Error, ErrorKind};
use clap::error::ErrorKind as ClapKind;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adaparse", version, about = "Multilingual dependency parser with language-conditioned adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// `code=path` pair naming a treebank file and its language.
#[derive(Clone, Debug)]
struct TreebankArg {
    lang: String,
    path: PathBuf,
}

fn treebank_arg(s: &str) -> Result<TreebankArg, String> {
    match s.split_once('=') {
        Some((lang, path)) if !lang.is_empty() && !path.is_empty() => Ok(TreebankArg {
            lang: lang.to_string(),
            path: path.into(),
        }),
        _ => Err(format!("expected code=path, got {s:?}")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write it as a bundle directory.
    Train {
        /// TOML training config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "treebank", value_name = "CODE=PATH", value_parser = treebank_arg, required = true)]
        treebanks: Vec<TreebankArg>,
        /// Development treebanks used for model selection.
        #[arg(long = "dev", value_name = "CODE=PATH", value_parser = treebank_arg)]
        dev: Vec<TreebankArg>,
        #[arg(long)]
        typology: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse a CoNLL-U file, replacing HEAD and DEPREL.
    Parse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        lang: String,
        /// typology, learned, centroid or proxy:CODE; defaults to the training mode.
        #[arg(long)]
        langvec_mode: Option<LangVecMode>,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse a gold file and report UAS and LAS.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        lang: String,
        #[arg(long)]
        langvec_mode: Option<LangVecMode>,
    },
    /// Paired bootstrap test that system A has higher LAS than system B.
    Significance {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long = "predA")]
        pred_a: PathBuf,
        #[arg(long = "predB")]
        pred_b: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write the language vectors a model would use, one per line.
    ExportLangvec {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the mean first-layer weight of each typology feature group.
    ReportFeatures {
        #[arg(long)]
        model: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ClapKind::DisplayHelp | ClapKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(ErrorKind::Usage.exit_code() as u8),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}

fn load_config(path: Option<&Path>) -> adaparse::Result<TrainConfig> {
    match path {
        Some(p) => Ok(TrainConfig::load(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn read_all(args: &[TreebankArg], split: Split) -> adaparse::Result<Vec<adaparse::conllu::Treebank>> {
    args.iter().map(|a| read_treebank(&a.path, &a.lang, split)).collect()
}

fn write_out(path: &Path, text: &str) -> adaparse::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mode_or_default(model: &Model, mode: Option<LangVecMode>) -> LangVecMode {
    mode.unwrap_or_else(|| model.config.langvec_mode.clone())
}

fn run(command: Command) -> adaparse::Result<()> {
    match command {
        Command::Train {
            config,
            treebanks,
            dev,
            typology,
            out,
        } => {
            let config = load_config(config.as_deref())?;
            let typology = match typology {
                Some(p) => load_typology(p)?,
                None => TypologyTable::new(),
            };
            let train_tbs = read_all(&treebanks, Split::Train)?;
            let dev_tbs = read_all(&dev, Split::Dev)?;
            let (model, report) = train(&config, &train_tbs, &dev_tbs, &typology)?;
            for e in &report.epochs {
                match e.dev_las {
                    Some(las) => eprintln!("epoch {:>3}  steps {:>6}  loss {:.4}  dev LAS {las:.2}", e.epoch, e.steps, e.train_loss),
                    None => eprintln!("epoch {:>3}  steps {:>6}  loss {:.4}", e.epoch, e.steps, e.train_loss),
                }
            }
            if report.skipped > 0 {
                eprintln!("skipped {} sentences longer than the encoder limit", report.skipped);
            }
            if let Some(best) = report.best_epoch {
                eprintln!("kept epoch {best}");
            }
            save_model(&model, &out)?;
            println!("{}", out.display());
        }
        Command::Parse {
            model,
            input,
            lang,
            langvec_mode,
            out,
        } => {
            let model = load_model(model)?;
            let mode = mode_or_default(&model, langvec_mode);
            let text = parse_file(&model, input, &lang, &mode)?;
            match out {
                Some(p) => write_out(&p, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Eval {
            model,
            gold,
            lang,
            langvec_mode,
        } => {
            let model = load_model(model)?;
            let mode = mode_or_default(&model, langvec_mode);
            let tb = read_treebank(gold, &lang, Split::Test)?;
            let m = evaluate(&model, &tb, &mode)?;
            let c = m.total();
            println!("lang\twords\tUAS\tLAS");
            println!("{lang}\t{}\t{:.2}\t{:.2}", c.words, c.uas(), c.las());
        }
        Command::Significance {
            gold,
            pred_a,
            pred_b,
            iters,
            seed,
        } => {
            let g = read_treebank(gold, "xx", Split::Test)?;
            let a = read_treebank(pred_a, "xx", Split::Test)?;
            let b = read_treebank(pred_b, "xx", Split::Test)?;
            let p = bootstrap_significance(&g.sentences, &a.sentences, &b.sentences, iters, seed)?;
            println!("p = {p:.4}");
        }
        Command::ExportLangvec { model, out } => {
            let model = load_model(model)?;
            if !model.config.cpg_mode.conditioned() {
                return Err(Error::Data("model has no language conditioning (cpg_mode = off)".into()));
            }
            let mode = &model.config.langvec_mode;
            let mut codes: Vec<String> = model.languages.clone();
            if *mode == LangVecMode::Typology {
                codes.extend(model.typology.iter().map(|(c, _)| c.to_string()));
                codes.sort();
                codes.dedup();
            }
            let mut rows = Vec::new();
            for code in codes {
                if let Some(e) = model.resolve(&code, mode)? {
                    rows.push((code, e));
                }
            }
            write_out(&out, &write_langvec_tsv(rows.iter().map(|(c, e)| (c.as_str(), e))))?;
        }
        Command::ReportFeatures { model } => {
            let model = load_model(model)?;
            let net = model.lang_net().ok_or(CpgError::NoNetwork)?;
            let [syntax, phonology, inventory] = feature_weight_report(&net);
            println!("group\tmean_weight");
            println!("syntax\t{syntax:.6}");
            println!("phonology\t{phonology:.6}");
            println!("inventory\t{inventory:.6}");
        }
    }
    Ok(())
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use fmvit::data::{load_split, write_data_dir, Split, SyntheticSpec};
use fmvit::metrics::{apcer_bpcer_acer, tpr_at_fpr, ScoreSet};
use fmvit::model::{Model, ModelConfig};
use fmvit::train::{
    default_subsets, eval_row, inspect, rows_kv, rows_table, score_split, subset_name, train, EvalRow,
    ThresholdRule, TrainConfig,
};
use fmvit::{Error, Modality};

const SEED_ENV: &str = "FMVIT_SEED";

#[derive(Parser)]
#[command(name = "fmvit", version, about = "Flexible-modal ViT: synthetic data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/dev/test FMVD files and a manifest.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes model.fmvt, model.cfg and report.txt.
    Train {
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        train_config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on modality subsets of the dev/test splits.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Subset such as `r` or `r,d`; repeat for several rows. Defaults to
        /// each single modality plus all together.
        #[arg(long = "modalities")]
        subsets: Vec<String>,
        /// `dev`, or a `label<TAB>score` file whose EER threshold is used.
        #[arg(long, default_value = "dev")]
        threshold_from: String,
        /// `eer` or `bpcer:<rate>`.
        #[arg(long, default_value = "eer")]
        rule: ThresholdRule,
        /// Directory for `<subset>.dev.scores` and `<subset>.test.scores`.
        #[arg(long)]
        dump_scores: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump relevance maps, masks and attention weights of one stage.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        stage: usize,
        /// train, dev or test.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-score dumped score files: threshold on `--dev`, report on `--test`.
    Metrics {
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "eer")]
        rule: ThresholdRule,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ShapeMismatch { .. } | Error::Shape { .. } | Error::OutOfBounds { .. } => 2,
        Error::Format(_) | Error::Io(_) | Error::ClassAbsent { .. } | Error::InvalidLabel(_) => 3,
        Error::Numeric(_) | Error::Domain { .. } => 4,
        _ => 1,
    }
}

fn seed_override() -> Result<Option<u64>, Error> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn parse_split(s: &str) -> Result<Split, Error> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
}

fn print_rows(rows: &[EvalRow]) {
    print!("{}", rows_table(rows));
    println!();
    print!("{}", rows_kv(rows));
}

fn run(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::GenData { spec, out } => {
            let mut spec = SyntheticSpec::load(&spec)?;
            if let Some(seed) = seed_override()? {
                spec.seed = seed;
            }
            write_data_dir(&spec, &out)?;
            for split in Split::ALL {
                println!("{}: {} samples", split.file_name(), spec.count(split));
            }
        }
        Cmd::Train {
            model_config,
            train_config,
            data,
            out,
        } => {
            let mcfg = ModelConfig::load(&model_config)?;
            let mut tcfg = TrainConfig::load(&train_config)?;
            if let Some(seed) = seed_override()? {
                tcfg.seed = seed;
            }
            let [tr, dev, te] = [Split::Train, Split::Dev, Split::Test].map(|s| load_split(&data, s));
            let (tr, dev, te) = (tr?, dev?, te?);
            let start = Instant::now();
            let outcome = train(&mcfg, &tcfg, &tr, &dev, &te)?;
            let secs = start.elapsed().as_secs_f64();
            std::fs::create_dir_all(&out)?;
            outcome.model.save(&out.join("model.fmvt"))?;
            let text = outcome.report.to_text();
            std::fs::write(out.join("report.txt"), &text)?;
            std::fs::write(out.join("timing.txt"), format!("wall_seconds={secs:.3}\n"))?;
            print!("{text}");
            eprintln!("trained in {secs:.1}s");
        }
        Cmd::Eval {
            ckpt,
            data,
            subsets,
            threshold_from,
            rule,
            dump_scores,
            seed,
        } => {
            let model = Model::load(&ckpt)?;
            let subsets = if subsets.is_empty() {
                default_subsets(&model.config)
            } else {
                subsets.iter().map(|s| Modality::parse_list(s)).collect::<Result<_, _>>()?
            };
            let external = match threshold_from.as_str() {
                "dev" => None,
                path => Some(ScoreSet::load(Path::new(path))?),
            };
            let dev = load_split(&data, Split::Dev)?;
            let test = load_split(&data, Split::Test)?;
            if let Some(dir) = &dump_scores {
                std::fs::create_dir_all(dir)?;
            }
            let mut rows = Vec::new();
            for subset in &subsets {
                let dev_scores = score_split(&model, &dev, subset, seed)?;
                let test_scores = score_split(&model, &test, subset, seed)?;
                let t = rule.select(external.as_ref().unwrap_or(&dev_scores))?;
                rows.push(eval_row(subset, t, &dev_scores, &test_scores)?);
                if let Some(dir) = &dump_scores {
                    let name = subset_name(subset);
                    dev_scores.save(&dir.join(format!("{name}.dev.scores")))?;
                    test_scores.save(&dir.join(format!("{name}.test.scores")))?;
                }
            }
            print_rows(&rows);
        }
        Cmd::Inspect {
            ckpt,
            data,
            sample,
            stage,
            split,
            seed,
        } => {
            let model = Model::load(&ckpt)?;
            let ds = load_split(&data, parse_split(&split)?)?;
            print!("{}", inspect(&model, &ds, sample, stage, seed)?.to_text());
        }
        Cmd::Metrics { dev, test, rule } => {
            let dev = ScoreSet::load(&dev)?;
            let test = ScoreSet::load(&test)?;
            let t = rule.select(&dev)?;
            let d = apcer_bpcer_acer(&dev, t)?;
            let r = apcer_bpcer_acer(&test, t)?;
            println!("threshold={t:?}");
            println!("dev_acer={:?}", d.acer);
            println!("test_apcer={:?}", r.apcer);
            println!("test_bpcer={:?}", r.bpcer);
            println!("test_acer={:?}", r.acer);
            println!("test_hter={:?}", (r.apcer + r.bpcer) / 2.0);
            println!("tpr_at_fpr_1e-2={:?}", tpr_at_fpr(&test, 1e-2)?);
            println!("tpr_at_fpr_1e-4={:?}", tpr_at_fpr(&test, 1e-4)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

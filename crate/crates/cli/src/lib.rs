//! Command-line experiment driver.
//!
//! Every command works inside one `--out` directory:
//!
//! | file | written by |
//! |------|------------|
//! | `bundle.gsd`, `labels.csv` | `gen` |
//! | `base.gsck`, `history.csv` | `train` |
//! | `adapt_<alpha>/` | `adapt`, `sweep-alpha` |
//! | `sweep.csv` | `sweep-alpha` |
//! | `ensemble.spec`, `weights.csv` | `ensemble` |
//! | `eval_<model>.csv` | `eval` |
//! | `scores.csv`, `submission.csv` | `predict` |
//! | `manifest.txt`, `config.txt` | every command |

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use geoshift::adapt::{adapt_all, FoldModels};
use geoshift::checkpoint::{load_checkpoint, save_checkpoint};
use geoshift::dataset::{generate, labels_csv, read_bundle, samples_to_matrix, truths, write_bundle, DatasetBundle, SplitKind};
use geoshift::ensemble::{
    combine_scores, group_scores, parse_spec_text, search_weights_on_scores, spec_text, validate_weights, Group, Member,
};
use geoshift::metrics::{evaluate, threshold_scores, MetricsReport};
use geoshift::optimize::{history_csv, train_base};
use geoshift::{Error, Matrix, Result};

pub use config::ExperimentConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "geoshift", version, about = "Label-shift adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Workspace directory for all artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for fold adaptation.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic bundle.
    Gen(Common),
    /// Train the base model.
    Train(Common),
    /// Adapt the base model for one alpha.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: f64,
    },
    /// Adapt for several alphas and write the per-alpha score curve.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        /// Defaults to `adapt.alphas`.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
    /// Search group weights (or take `ensemble.weights` with --fixed).
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fixed: bool,
    },
    /// Report F2, precision and recall on named splits.
    Eval {
        #[command(flatten)]
        common: Common,
        /// `base`, `adapt:<alpha>` or `ensemble`.
        #[arg(long, default_value = "base")]
        model: String,
        #[arg(long, value_delimiter = ',', default_value = "source_val,target_eval,target_hidden")]
        splits: Vec<String>,
    },
    /// Write per-class scores and the thresholded submission.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "ensemble")]
        model: String,
        #[arg(long, default_value = "target_hidden")]
        split: String,
    },
    /// Print every config key with its default.
    Keys,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Shape(_) | Error::Sampler(_) => EXIT_DATA,
        e if e.is_data_error() => EXIT_DATA,
        _ => EXIT_USAGE,
    }
}

/// Runs one command line (including the program name) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Which model a command scores with.
#[derive(Debug, Clone, PartialEq)]
enum ModelRef {
    Base,
    Adapted(f64),
    Ensemble,
}

impl ModelRef {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(ModelRef::Base),
            "ensemble" => Ok(ModelRef::Ensemble),
            _ => s
                .strip_prefix("adapt:")
                .and_then(|a| a.parse::<f64>().ok())
                .map(ModelRef::Adapted)
                .ok_or_else(|| Error::Usage(format!("unknown model {s:?}; use base, adapt:<alpha> or ensemble"))),
        }
    }

    fn tag(&self) -> String {
        match self {
            ModelRef::Base => "base".into(),
            ModelRef::Adapted(a) => format!("adapt_{a}"),
            ModelRef::Ensemble => "ensemble".into(),
        }
    }
}

fn parse_split(name: &str) -> Result<SplitKind> {
    SplitKind::from_name(name).ok_or_else(|| Error::Usage(format!("unknown split {name:?}")))
}

fn check_alpha(a: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&a) {
        Ok(a)
    } else {
        Err(Error::Usage(format!("alpha {a} outside [0, 1]")))
    }
}

struct Workspace {
    out: PathBuf,
    cfg: ExperimentConfig,
    jobs: usize,
}

impl Workspace {
    fn open(common: Common) -> Result<Self> {
        let cfg = ExperimentConfig::resolve(common.config.as_deref(), &common.set)?;
        if common.jobs == 0 {
            return Err(Error::Usage("--jobs must be at least 1".into()));
        }
        Ok(Workspace {
            out: common.out,
            cfg,
            jobs: common.jobs,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn prepare(&self, command: &str) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        write_file(&self.path("config.txt"), &self.cfg.to_text())?;
        let manifest = format!(
            "config_sha256 = {}\nseed = {}\ncommand = {command}\n",
            self.cfg.hash(),
            self.cfg.seed()?
        );
        write_file(&self.path("manifest.txt"), &manifest)
    }

    fn bundle(&self) -> Result<DatasetBundle> {
        read_bundle(&self.path("bundle.gsd"))
    }

    fn adapt_dir(alpha: f64) -> String {
        format!("adapt_{alpha}")
    }

    fn load_model(&self, which: &ModelRef) -> Result<Scorer> {
        Ok(match which {
            ModelRef::Base => Scorer::Member(Member::Base(load_checkpoint(&self.path("base.gsck"))?)),
            ModelRef::Adapted(a) => Scorer::Member(Member::Folds(FoldModels::load(&self.path(&Self::adapt_dir(*a)))?)),
            ModelRef::Ensemble => {
                let text = std::fs::read_to_string(self.path("ensemble.spec"))
                    .map_err(|e| Error::io(self.path("ensemble.spec"), e))?;
                let mut groups = Vec::new();
                let mut weights = Vec::new();
                for (name, w, members) in parse_spec_text(&text)? {
                    let members = members
                        .iter()
                        .map(|m| self.load_member(m))
                        .collect::<Result<Vec<_>>>()?;
                    groups.push(Group::new(name, members)?);
                    weights.push(w);
                }
                Scorer::Ensemble(groups, weights)
            }
        })
    }

    fn load_member(&self, rel: &str) -> Result<Member> {
        let path = self.path(rel);
        if rel.ends_with(".gsck") {
            Ok(Member::Base(load_checkpoint(&path)?))
        } else {
            Ok(Member::Folds(FoldModels::load(&path)?))
        }
    }
}

enum Scorer {
    Member(Member),
    Ensemble(Vec<Group>, Vec<f64>),
}

impl Scorer {
    fn scores(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Scorer::Member(m) => m.predict(x),
            Scorer::Ensemble(groups, weights) => {
                let s = groups.iter().map(|g| group_scores(g, x)).collect::<Result<Vec<_>>>()?;
                combine_scores(&s, weights)
            }
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn split_scores(scorer: &Scorer, bundle: &DatasetBundle, kind: SplitKind) -> Result<Matrix> {
    scorer.scores(&samples_to_matrix(bundle.split(kind))?)
}

fn report(scorer: &Scorer, bundle: &DatasetBundle, kind: SplitKind, threshold: f64) -> Result<MetricsReport> {
    evaluate(&split_scores(scorer, bundle, kind)?, &truths(bundle.split(kind)), threshold)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Keys => {
            print!("{}", config::describe_keys());
            Ok(())
        }
        Command::Gen(common) => {
            let ws = Workspace::open(common)?;
            let gen = ws.cfg.generator()?;
            ws.prepare("gen")?;
            let bundle = generate(&gen)?;
            write_bundle(&bundle, &ws.path("bundle.gsd"))?;
            write_file(&ws.path("labels.csv"), &labels_csv(&bundle))
        }
        Command::Train(common) => {
            let ws = Workspace::open(common)?;
            let train = ws.cfg.train()?;
            let bundle = ws.bundle()?;
            let model = ws.cfg.model(bundle.input_dim(), bundle.num_classes())?;
            ws.prepare("train")?;
            let outcome = train_base(&model, &bundle, &train)?;
            save_checkpoint(&outcome.params, &ws.path("base.gsck"))?;
            write_file(&ws.path("history.csv"), &history_csv(&outcome.history))
        }
        Command::Adapt { common, alpha } => {
            let ws = Workspace::open(common)?;
            let cfg = ws.cfg.adapt(check_alpha(alpha)?)?;
            let bundle = ws.bundle()?;
            let base = load_checkpoint(&ws.path("base.gsck"))?;
            ws.prepare("adapt")?;
            adapt_all(&base, &bundle, &cfg, ws.jobs)?.save(&ws.path(&Workspace::adapt_dir(alpha)))
        }
        Command::SweepAlpha { common, alphas } => {
            let ws = Workspace::open(common)?;
            let alphas = match alphas {
                Some(a) => a,
                None => ws.cfg.alphas()?,
            };
            let cfgs = alphas
                .iter()
                .map(|&a| ws.cfg.adapt(check_alpha(a)?))
                .collect::<Result<Vec<_>>>()?;
            let threshold = ws.cfg.threshold()?;
            let bundle = ws.bundle()?;
            let base = load_checkpoint(&ws.path("base.gsck"))?;
            ws.prepare("sweep-alpha")?;
            let mut csv = String::from("alpha,val_f2,stage1_f2,hidden_f2\n");
            for cfg in &cfgs {
                let fm = adapt_all(&base, &bundle, cfg, ws.jobs)?;
                fm.save(&ws.path(&Workspace::adapt_dir(cfg.alpha)))?;
                let scorer = Scorer::Member(Member::Folds(fm));
                let f2 = |k| report(&scorer, &bundle, k, threshold).map(|r| r.f2);
                let _ = writeln!(
                    csv,
                    "{},{:.6},{:.6},{:.6}",
                    cfg.alpha,
                    f2(SplitKind::SourceVal)?,
                    f2(SplitKind::TargetEval)?,
                    f2(SplitKind::TargetHidden)?
                );
            }
            write_file(&ws.path("sweep.csv"), &csv)
        }
        Command::Ensemble { common, fixed } => {
            let ws = Workspace::open(common)?;
            let search = ws.cfg.search()?;
            let alphas = ws.cfg.alphas()?;
            for &a in &alphas {
                check_alpha(a)?;
            }
            let fixed_weights = ws.cfg.fixed_weights()?;
            if fixed {
                validate_weights(&fixed_weights, alphas.len() + 1)?;
            }
            let bundle = ws.bundle()?;
            let mut entries: Vec<(String, Vec<String>)> = vec![("base".into(), vec!["base.gsck".into()])];
            for &a in &alphas {
                entries.push((format!("alpha_{a}"), vec![Workspace::adapt_dir(a)]));
            }
            let groups = entries
                .iter()
                .map(|(name, members)| {
                    let members = members
                        .iter()
                        .map(|m| ws.load_member(m))
                        .collect::<Result<Vec<_>>>()?;
                    Group::new(name.clone(), members)
                })
                .collect::<Result<Vec<_>>>()?;
            ws.prepare("ensemble")?;
            let weights = if fixed {
                fixed_weights
            } else {
                let scores_on = |kind| -> Result<Vec<Matrix>> {
                    let x = samples_to_matrix(bundle.split(kind))?;
                    groups.iter().map(|g| group_scores(g, &x)).collect()
                };
                let result = search_weights_on_scores(
                    &scores_on(SplitKind::TargetEval)?,
                    &truths(bundle.split(SplitKind::TargetEval)),
                    &scores_on(SplitKind::SourceVal)?,
                    &truths(bundle.split(SplitKind::SourceVal)),
                    &search,
                )?;
                write_file(&ws.path("weights.csv"), &result.report_csv())?;
                result.best().weights.clone()
            };
            let spec: Vec<_> = entries
                .into_iter()
                .zip(weights)
                .map(|((name, members), w)| (name, w, members))
                .collect();
            write_file(&ws.path("ensemble.spec"), &spec_text(&spec))
        }
        Command::Eval { common, model, splits } => {
            let ws = Workspace::open(common)?;
            let which = ModelRef::parse(&model)?;
            let kinds = splits.iter().map(|s| parse_split(s)).collect::<Result<Vec<_>>>()?;
            let threshold = ws.cfg.threshold()?;
            let bundle = ws.bundle()?;
            let scorer = ws.load_model(&which)?;
            ws.prepare("eval")?;
            let mut csv = String::from("split,f2,precision,recall,threshold,samples\n");
            for kind in kinds {
                let r = report(&scorer, &bundle, kind, threshold)?;
                println!(
                    "{:<14} f2 {:.4}  precision {:.4}  recall {:.4}  (n = {})",
                    kind.name(),
                    r.f2,
                    r.precision,
                    r.recall,
                    r.samples
                );
                let _ = writeln!(
                    csv,
                    "{},{:.6},{:.6},{:.6},{},{}",
                    kind.name(),
                    r.f2,
                    r.precision,
                    r.recall,
                    r.threshold,
                    r.samples
                );
            }
            write_file(&ws.path(&format!("eval_{}.csv", which.tag())), &csv)
        }
        Command::Predict { common, model, split } => {
            let ws = Workspace::open(common)?;
            let which = ModelRef::parse(&model)?;
            let kind = parse_split(&split)?;
            let threshold = ws.cfg.threshold()?;
            let bundle = ws.bundle()?;
            let scorer = ws.load_model(&which)?;
            ws.prepare("predict")?;
            let samples = bundle.split(kind);
            let scores = split_scores(&scorer, &bundle, kind)?;
            let mut table = String::from("sample_id");
            for name in bundle.vocabulary.names() {
                let _ = write!(table, ",{name}");
            }
            table.push('\n');
            for (r, s) in samples.iter().enumerate() {
                table.push_str(&s.sample_id);
                for v in scores.row(r) {
                    let _ = write!(table, ",{v:.6}");
                }
                table.push('\n');
            }
            let mut submission = String::from("sample_id,labels\n");
            for (s, labels) in samples.iter().zip(threshold_scores(&scores, threshold)) {
                let _ = writeln!(submission, "{},{labels}", s.sample_id);
            }
            write_file(&ws.path("scores.csv"), &table)?;
            write_file(&ws.path("submission.csv"), &submission)
        }
    }
}

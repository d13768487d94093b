//! Named multi-stage pipelines.
//!
//! A recipe is a list of subcommand invocations over files in a work
//! directory. Before anything runs, every stage input must either exist or be
//! produced by an earlier stage. Each completed stage appends a record to
//! `manifest.jsonl` in the work directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use tabula_core::Config;

use crate::cli::RecipeArgs;
use crate::manifest::{self, FileHash, StageRecord};

/// Dense variants differ in encoder inputs, pre-training and negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Negatives {
    None,
    /// Mined from the dense model's own retrieval on the training questions.
    Dense,
    /// Mined from BM25 retrieval on the training questions.
    Bm25,
}

#[derive(Debug, Clone, Copy)]
struct Variant {
    pretrain: bool,
    negatives: Negatives,
    use_structure: bool,
    schema_only: bool,
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Bm25,
    Dense(Variant),
}

struct RecipeDef {
    name: &'static str,
    aliases: &'static [&'static str],
    about: &'static str,
    kind: Kind,
}

const DENSE: Variant = Variant {
    pretrain: true,
    negatives: Negatives::None,
    use_structure: true,
    schema_only: false,
};

const RECIPES: &[RecipeDef] = &[
    RecipeDef {
        name: "bm25_baseline",
        aliases: &["bm25"],
        about: "BM25 retrieval",
        kind: Kind::Bm25,
    },
    RecipeDef {
        name: "dense",
        aliases: &["dtr"],
        about: "pre-trained then fine-tuned dual encoder",
        kind: Kind::Dense(DENSE),
    },
    RecipeDef {
        name: "dense_text",
        aliases: &["dtr_text"],
        about: "dual encoder without structural table features",
        kind: Kind::Dense(Variant {
            use_structure: false,
            ..DENSE
        }),
    },
    RecipeDef {
        name: "dense_schema",
        aliases: &["dtr_schema"],
        about: "dual encoder over title, section and header only",
        kind: Kind::Dense(Variant {
            schema_only: true,
            ..DENSE
        }),
    },
    RecipeDef {
        name: "dense_hn_bm25",
        aliases: &["dtr_plus_hnbm25"],
        about: "dual encoder retrained with BM25-mined hard negatives",
        kind: Kind::Dense(Variant {
            negatives: Negatives::Bm25,
            ..DENSE
        }),
    },
    RecipeDef {
        name: "dense_hn",
        aliases: &["dtr_plus_hn"],
        about: "dual encoder retrained with hard negatives mined from its own retrieval",
        kind: Kind::Dense(Variant {
            negatives: Negatives::Dense,
            ..DENSE
        }),
    },
    RecipeDef {
        name: "dense_no_pretrain",
        aliases: &["dtr_minus_pt"],
        about: "dual encoder fine-tuned from random initialization",
        kind: Kind::Dense(Variant {
            pretrain: false,
            ..DENSE
        }),
    },
];

fn find(name: &str) -> Option<&'static RecipeDef> {
    RECIPES.iter().find(|r| r.name == name || r.aliases.contains(&name))
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub command: &'static str,
    pub args: Vec<String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

struct Builder<'a> {
    dir: &'a Path,
    stages: Vec<Stage>,
}

impl Builder<'_> {
    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// `files` are (flag, path, is_output) triples; `options` plain flag values.
    fn stage(&mut self, command: &'static str, files: &[(&str, &Path, bool)], options: &[(&str, String)]) {
        let mut args = Vec::new();
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for (flag, path, is_output) in files {
            args.push(format!("--{flag}"));
            args.push(path.display().to_string());
            if *is_output {
                outputs.push(path.to_path_buf());
            } else {
                inputs.push(path.to_path_buf());
            }
        }
        for (flag, value) in options {
            args.push(format!("--{flag}"));
            args.push(value.clone());
        }
        self.stages.push(Stage {
            command,
            args,
            inputs,
            outputs,
        });
    }
}

pub struct Inputs<'a> {
    pub tables: &'a Path,
    pub train_questions: &'a Path,
    pub test_questions: &'a Path,
    pub dev_questions: Option<&'a Path>,
}

const IN: bool = false;
const OUT: bool = true;

fn plan(def: &RecipeDef, dir: &Path, inp: &Inputs, cfg: &Config) -> Vec<Stage> {
    let mut b = Builder { dir, stages: Vec::new() };
    let tables = inp.tables;
    let test_run = b.file("run.test.tsv");
    let report = b.file("report.test.json");
    let depth = cfg.mine_depth.to_string();
    match def.kind {
        Kind::Bm25 => {
            let idx = b.file("bm25.idx");
            b.stage("index-bm25", &[("tables", tables, IN), ("out", &idx, OUT)], &[]);
            b.stage(
                "retrieve",
                &[("index", &idx, IN), ("questions", inp.test_questions, IN), ("out", &test_run, OUT)],
                &[],
            );
        }
        Kind::Dense(v) => {
            let pretrained = b.file("pretrained.ckpt");
            if v.pretrain {
                let pairs = b.file("pretrain_pairs.jsonl");
                b.stage("pretrain-pairs", &[("tables", tables, IN), ("out", &pairs, OUT)], &[]);
                b.stage(
                    "pretrain",
                    &[
                        ("tables", tables, IN),
                        ("pairs", &pairs, IN),
                        ("out", &pretrained, OUT),
                        ("log", &b.file("pretrain.log.tsv"), OUT),
                    ],
                    &[],
                );
            }
            let init: Vec<(&str, &Path, bool)> = if v.pretrain {
                vec![("init", &pretrained, IN)]
            } else {
                vec![]
            };
            let dev: Vec<(&str, &Path, bool)> = inp
                .dev_questions
                .map(|d| vec![("dev-questions", d, IN)])
                .unwrap_or_default();
            let train = |b: &mut Builder, out: &Path, log: &Path, negatives: Option<&Path>| {
                let mut files = vec![("tables", tables, IN), ("questions", inp.train_questions, IN)];
                files.extend(init.iter().copied());
                files.extend(dev.iter().copied());
                if let Some(n) = negatives {
                    files.push(("negatives", n, IN));
                }
                files.push(("out", out, OUT));
                files.push(("log", log, OUT));
                b.stage("train", &files, &[]);
            };
            let encode_and_retrieve = |b: &mut Builder, ckpt: &Path, emb: &Path, questions: &Path, run: &Path, k: Option<&str>| {
                if !b.stages.iter().any(|s| s.outputs.iter().any(|o| o == emb)) {
                    b.stage(
                        "encode-corpus",
                        &[("tables", tables, IN), ("checkpoint", ckpt, IN), ("out", emb, OUT)],
                        &[],
                    );
                }
                let options: Vec<(&str, String)> = k.map(|k| vec![("k", k.to_string())]).unwrap_or_default();
                b.stage(
                    "retrieve",
                    &[("index", emb, IN), ("checkpoint", ckpt, IN), ("questions", questions, IN), ("out", run, OUT)],
                    &options,
                );
            };
            let model = b.file("model.ckpt");
            let emb = b.file("tables.emb");
            let negatives = b.file("negatives.tsv");
            let train_run = b.file("run.train.tsv");
            let mine = |b: &mut Builder, run: &Path| {
                b.stage(
                    "mine",
                    &[
                        ("run", run, IN),
                        ("questions", inp.train_questions, IN),
                        ("tables", tables, IN),
                        ("out", &negatives, OUT),
                    ],
                    &[],
                );
            };
            let log = b.file("train.log.tsv");
            match v.negatives {
                Negatives::None => {
                    train(&mut b, &model, &log, None);
                    encode_and_retrieve(&mut b, &model, &emb, inp.test_questions, &test_run, None);
                }
                Negatives::Dense => {
                    let first = b.file("model.first.ckpt");
                    let first_emb = b.file("tables.first.emb");
                    let first_log = b.file("train.first.log.tsv");
                    train(&mut b, &first, &first_log, None);
                    encode_and_retrieve(&mut b, &first, &first_emb, inp.train_questions, &train_run, Some(&depth));
                    mine(&mut b, &train_run);
                    train(&mut b, &model, &log, Some(&negatives));
                    encode_and_retrieve(&mut b, &model, &emb, inp.test_questions, &test_run, None);
                }
                Negatives::Bm25 => {
                    let idx = b.file("bm25.idx");
                    b.stage("index-bm25", &[("tables", tables, IN), ("out", &idx, OUT)], &[]);
                    b.stage(
                        "retrieve",
                        &[("index", &idx, IN), ("questions", inp.train_questions, IN), ("out", &train_run, OUT)],
                        &[("k", depth.clone())],
                    );
                    mine(&mut b, &train_run);
                    train(&mut b, &model, &log, Some(&negatives));
                    encode_and_retrieve(&mut b, &model, &emb, inp.test_questions, &test_run, None);
                }
            }
        }
    }
    b.stage(
        "eval-retrieval",
        &[("run", &test_run, IN), ("questions", inp.test_questions, IN), ("out", &report, OUT)],
        &[],
    );
    b.stages
}

/// Config written for (and shared by) every stage of a recipe.
fn recipe_config(def: &RecipeDef, cfg: &Config) -> Result<Config> {
    let mut cfg = cfg.clone();
    if let Kind::Dense(v) = def.kind {
        cfg.use_structure = v.use_structure;
        cfg.schema_only = v.schema_only;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Fails unless every stage input exists already or is an earlier stage's output.
fn check_inputs(stages: &[Stage]) -> Result<()> {
    let mut produced: Vec<&Path> = Vec::new();
    for (i, s) in stages.iter().enumerate() {
        for input in &s.inputs {
            if !produced.contains(&input.as_path()) && !input.is_file() {
                bail!("stage {} ({}): input {} does not exist", i + 1, s.command, input.display());
            }
        }
        produced.extend(s.outputs.iter().map(PathBuf::as_path));
    }
    Ok(())
}

pub fn list() -> String {
    let mut out = String::new();
    let dir = Path::new("WORKDIR");
    let inp = Inputs {
        tables: Path::new("TABLES"),
        train_questions: Path::new("TRAIN"),
        test_questions: Path::new("TEST"),
        dev_questions: None,
    };
    for def in RECIPES {
        let stages: Vec<&str> = plan(def, dir, &inp, &Config::default()).iter().map(|s| s.command).collect();
        out.push_str(&format!(
            "{} (alias {}): {}\n    {}\n",
            def.name,
            def.aliases.join(", "),
            def.about,
            stages.join(" -> ")
        ));
    }
    out
}

pub fn run_recipe(a: &RecipeArgs, cfg: &Config) -> Result<()> {
    if a.list {
        print!("{}", list());
        return Ok(());
    }
    let name = a.name.as_deref().context("recipe name is required")?;
    let def = find(name).with_context(|| {
        let names: Vec<&str> = RECIPES.iter().map(|r| r.name).collect();
        format!("unknown recipe {name:?}; available: {}", names.join(", "))
    })?;
    let (Some(dir), Some(tables), Some(train_q), Some(test_q)) =
        (&a.workdir, &a.tables, &a.train_questions, &a.test_questions)
    else {
        bail!("--workdir, --tables, --train-questions and --test-questions are required");
    };
    let inp = Inputs {
        tables,
        train_questions: train_q,
        test_questions: test_q,
        dev_questions: a.dev_questions.as_deref(),
    };
    let cfg = recipe_config(def, cfg)?;
    let stages = plan(def, dir, &inp, &cfg);
    check_inputs(&stages)?;

    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let config_path = dir.join("config.txt");
    std::fs::write(&config_path, cfg.to_text()).with_context(|| format!("writing {}", config_path.display()))?;
    let manifest_path = dir.join("manifest.jsonl");

    for (i, s) in stages.iter().enumerate() {
        eprintln!("[{}/{}] {} {}", i + 1, stages.len(), s.command, s.args.join(" "));
        let inputs = s.inputs.iter().map(|p| FileHash::of(p)).collect::<Result<Vec<_>>>()?;
        let mut argv = vec![
            "tabula".to_string(),
            s.command.to_string(),
            "--config".to_string(),
            config_path.display().to_string(),
        ];
        argv.extend(s.args.iter().cloned());
        let start = Instant::now();
        crate::run(argv).with_context(|| format!("stage {} ({}) failed", i + 1, s.command))?;
        let wall = start.elapsed().as_secs_f64();
        let outputs = s.outputs.iter().map(|p| FileHash::of(p)).collect::<Result<Vec<_>>>()?;
        manifest::append(
            &manifest_path,
            &StageRecord {
                recipe: def.name.to_string(),
                stage: i + 1,
                command: s.command.to_string(),
                args: s.args.clone(),
                inputs,
                outputs,
                wall_time_secs: wall,
            },
        )?;
    }
    eprintln!("recipe {}: report at {}", def.name, dir.join("report.test.json").display());
    Ok(())
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use scanpath::corpus::{
    generate_synthetic_corpus, load_corpus, load_sentences, make_splits, save_corpus,
    write_scanpaths, Corpus, SplitKind, SplitPlan, SynthSpec,
};
use scanpath::embed::EmbeddingSet;
use scanpath::eval::{
    evaluate_nll, generate_for_test, human_nld, multimatch_report, nld_report,
    nll_by_saccade_range, paired_ttest, parse_buckets, uniform_predictor, EmpiricalLabelDist,
    ModelPredictor, NllReport, Predictor,
};
use scanpath::model::ModelConfig;
use scanpath::scangen::{
    attention_heatmap, generate, sample_seed, write_heatmap_csv, GenerateOptions,
};
use scanpath::train::{
    fine_tune, load_checkpoint, train, AnyCheckpoint, Checkpoint, Precision, TrainConfig,
};
use scanpath_nn::Real;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::manifest::{manifest_path, Manifest};
use crate::{
    AblateArgs, BaselineArgs, BaselineKind, Cli, Command, EvalArgs, FinetuneArgs, FoldArgs,
    GenerateArgs, InspectArgs, Kind, SplitArgs, SynthArgs, TrainArgs, UsageError,
};

const SENTENCES: &str = "sentences.jsonl";
const SCANPATHS: &str = "scanpaths.jsonl";
const MODEL_FILE: &str = "model.eyckpt";

macro_rules! with_checkpoint {
    ($any:expr, $c:ident => $body:expr) => {
        match $any {
            AnyCheckpoint::F32($c) => $body,
            AnyCheckpoint::F64($c) => $body,
        }
    };
}

pub fn run(cli: &Cli) -> Result<()> {
    let threads = cli.threads;
    match &cli.command {
        Command::Split(a) => split(a, threads),
        Command::Train(a) => train_cmd(a, threads),
        Command::Finetune(a) => finetune(a, threads),
        Command::Eval(a) => eval_cmd(a, threads),
        Command::Baseline(a) => baseline(a, threads),
        Command::Generate(a) => generate_cmd(a, threads),
        Command::Inspect(a) => inspect(a, threads),
        Command::Synth(a) => synth(a, threads),
        Command::Ablate(a) => ablate(a, threads),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_corpus(dir: &Path, m: &mut Manifest) -> Result<Corpus> {
    let (s, p) = (dir.join(SENTENCES), dir.join(SCANPATHS));
    m.hash_file("corpus.sentences", &s)?;
    m.hash_file("corpus.scanpaths", &p)?;
    Ok(load_corpus(&s, &p)?)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(scanpath::Error::from)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn config_or_default<T: DeserializeOwned + Default + Serialize>(
    path: Option<&PathBuf>,
    name: &str,
    m: &mut Manifest,
) -> Result<T> {
    let value = match path {
        Some(p) => {
            m.hash_file(&format!("{name}.file"), p)?;
            read_json(p)?
        }
        None => T::default(),
    };
    m.hash_value(name, &value)?;
    Ok(value)
}

/// Train and test indices of a fold.
fn read_fold(
    a: &FoldArgs,
    m: &mut Manifest,
) -> Result<(Corpus, SplitPlan, Vec<usize>, Vec<usize>)> {
    let corpus = read_corpus(&a.corpus, m)?;
    m.hash_file("plan", &a.plan)?;
    let plan: SplitPlan = read_json(&a.plan)?;
    m.seed("split", plan.seed);
    let fold = plan.fold(a.fold)?;
    if let Some(&bad) = fold
        .train
        .iter()
        .chain(&fold.test)
        .find(|&&i| i >= corpus.scanpaths.len())
    {
        return Err(scanpath::Error::Invalid(format!(
            "plan references scanpath {bad}, the corpus has {}",
            corpus.scanpaths.len()
        ))
        .into());
    }
    let (train, test) = (fold.train_indices(), fold.test_indices());
    Ok((corpus, plan, train, test))
}

fn checkpoint_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MODEL_FILE)
    } else {
        path.to_path_buf()
    }
}

fn read_checkpoint(path: &Path, m: &mut Manifest) -> Result<AnyCheckpoint> {
    let file = checkpoint_file(path);
    m.hash_file("checkpoint", &file)?;
    load_checkpoint(&file).with_context(|| format!("loading {}", file.display()))
}

/// Explicit embeddings, else the file recorded in the checkpoint.
fn read_embeddings(
    explicit: Option<&PathBuf>,
    recorded: Option<&String>,
    m: &mut Manifest,
) -> Result<Option<EmbeddingSet>> {
    let path = explicit.cloned().or_else(|| recorded.map(PathBuf::from));
    match path {
        None => Ok(None),
        Some(p) => {
            m.hash_file("embeddings", &p)?;
            Ok(Some(
                EmbeddingSet::load(&p).with_context(|| format!("loading {}", p.display()))?,
            ))
        }
    }
}

fn nll_json(r: &NllReport) -> Value {
    json!({"mean": r.mean, "se": r.se, "per_scanpath": r.per_scanpath})
}

fn split(a: &SplitArgs, threads: Option<usize>) -> Result<()> {
    let mut m = Manifest::new("split", threads);
    let corpus = read_corpus(&a.corpus, &mut m)?;
    let kind = match a.kind {
        Kind::NewSentence => SplitKind::NewSentence,
        Kind::NewReader => SplitKind::NewReader,
        Kind::NewReaderNewSentence => SplitKind::NewReaderNewSentence,
    };
    m.seed("split", a.seed);
    let plan = make_splits(&corpus, kind, a.folds, a.seed)?;
    write_json(&a.out, &plan)?;
    m.output(&a.out);
    m.write(&manifest_path(&a.out, false))
}

fn save_run<F: Real>(ckpt: &Checkpoint<F>, out: &Path, m: &mut Manifest) -> Result<()> {
    fs::create_dir_all(out)?;
    let file = out.join(MODEL_FILE);
    ckpt.save(&file)?;
    let history = out.join("history.json");
    write_json(&history, &ckpt.history)?;
    m.output(&file);
    m.output(&history);
    m.write(&manifest_path(out, true))
}

fn model_and_train_config(
    config: Option<&PathBuf>,
    train_config: Option<&PathBuf>,
    m: &mut Manifest,
) -> Result<(ModelConfig, TrainConfig)> {
    let mc: ModelConfig = config_or_default(config, "model_config", m)?;
    let tc: TrainConfig = config_or_default(train_config, "train_config", m)?;
    Ok((mc, tc))
}

fn embeddings_for_training(
    path: Option<&PathBuf>,
    corpus: &Corpus,
    m: &mut Manifest,
) -> Result<Option<EmbeddingSet>> {
    let emb = read_embeddings(path, None, m)?;
    if let Some(e) = &emb {
        e.check_coverage(corpus)?;
    }
    Ok(emb)
}

fn train_one<F: Real>(
    corpus: &Corpus,
    train_idx: &[usize],
    emb: Option<&EmbeddingSet>,
    emb_path: Option<&PathBuf>,
    mc: &ModelConfig,
    tc: &TrainConfig,
) -> Result<Checkpoint<F>> {
    let mut ckpt = train::<F>(corpus, train_idx, emb, mc, tc)?;
    ckpt.embeddings = emb_path.map(|p| p.display().to_string());
    Ok(ckpt)
}

fn train_cmd(a: &TrainArgs, threads: Option<usize>) -> Result<()> {
    let mut m = Manifest::new("train", threads);
    let (corpus, _, train_idx, _) = read_fold(&a.fold, &mut m)?;
    let (mut mc, mut tc) =
        model_and_train_config(a.config.as_ref(), a.train_config.as_ref(), &mut m)?;
    if let Some(d) = &a.reader_embedding {
        mc.reader_embedding = Some(d.parse()?);
        m.hash_value("model_config", &mc)?;
    }
    if let Some(s) = a.seed {
        tc.seed = s;
        m.hash_value("train_config", &tc)?;
    }
    m.seed("train", tc.seed);
    let emb_path = a.embedding.embeddings.as_ref();
    let emb = embeddings_for_training(emb_path, &corpus, &mut m)?;
    m.precision = Some(format!("{:?}", tc.precision).to_lowercase());
    match tc.precision {
        Precision::F32 => save_run(
            &train_one::<f32>(&corpus, &train_idx, emb.as_ref(), emb_path, &mc, &tc)?,
            &a.out,
            &mut m,
        ),
        Precision::F64 => save_run(
            &train_one::<f64>(&corpus, &train_idx, emb.as_ref(), emb_path, &mc, &tc)?,
            &a.out,
            &mut m,
        ),
    }
}

fn finetune(a: &FinetuneArgs, threads: Option<usize>) -> Result<()> {
    let mut m = Manifest::new("finetune", threads);
    let any = read_checkpoint(&a.checkpoint, &mut m)?;
    let corpus = read_corpus(&a.corpus, &mut m)?;
    let mut tc: TrainConfig = config_or_default(a.train_config.as_ref(), "train_config", &mut m)?;
    tc.seed = a.seed;
    m.hash_value("train_config", &tc)?;
    m.seed("finetune", a.seed);
    with_checkpoint!(any, c => {
        let emb = read_embeddings(a.embeddings.as_ref(), c.embeddings.as_ref(), &mut m)?;
        m.precision = Some(precision_name(&c));
        let tuned = fine_tune(&c, &corpus, a.instances, emb.as_ref(), &tc)?;
        save_run(&tuned, &a.out, &mut m)
    })
}

fn precision_name<F: Real>(_: &Checkpoint<F>) -> String {
    F::NAME.to_string()
}

fn eval_cmd(a: &EvalArgs, threads: Option<usize>) -> Result<()> {
    let mut m = Manifest::new("eval", threads);
    let metrics: Vec<&str> = a
        .metrics
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if let Some(bad) = metrics
        .iter()
        .find(|x| !["nll", "nld", "multimatch"].contains(x))
    {
        return Err(usage(format!(
            "unknown metric `{bad}` (expected nll, nld, multimatch)"
        )));
    }
    let any = read_checkpoint(&a.checkpoint, &mut m)?;
    let (corpus, plan, _, test) = read_fold(&a.fold, &mut m)?;
    m.seed("generation", a.seed);
    let mut report = json!({
        "fold": a.fold.fold,
        "split": plan.kind,
        "n_test": test.len(),
    });
    with_checkpoint!(any, c => {
        let emb = read_embeddings(a.embeddings.as_ref(), c.embeddings.as_ref(), &mut m)?;
        m.precision = Some(precision_name(&c));
        report["max_len"] = json!(c.model.max_len);
        if metrics.contains(&"nll") {
            let r = evaluate_nll(&ModelPredictor::new(&c, emb.as_ref()), &corpus, &test)?;
            report["nll"] = nll_json(&r);
        }
        if metrics.contains(&"nld") || metrics.contains(&"multimatch") {
            let generated = generate_for_test(&c, emb.as_ref(), &corpus, &test, a.seed)?;
            if metrics.contains(&"nld") {
                let r = nld_report(&corpus, &test, &generated)?;
                let human = human_nld(&corpus, &test, a.seed).ok();
                report["nld"] = json!({
                    "mean": r.mean,
                    "se": r.se,
                    "per_scanpath": r.per_scanpath,
                    "human": human.map(|h| json!({"mean": h.mean, "se": h.se})),
                });
            }
            if metrics.contains(&"multimatch") {
                report["multimatch"] = serde_json::to_value(multimatch_report(&corpus, &test, &generated, c.model.max_len)?)?;
            }
        }
    });
    write_json(&a.out, &report)?;
    m.output(&a.out);
    m.write(&manifest_path(&a.out, false))
}

fn baseline(a: &BaselineArgs, threads: Option<usize>) -> Result<()> {
    let mut m = Manifest::new("baseline", threads);
    let (corpus, plan, train_idx, test) = read_fold(&a.fold, &mut m)?;
    let max_len = a
        .max_len
        .unwrap_or_else(|| corpus.max_sentence_len(&train_idx));
    let (name, predictor) = match a.kind {
        BaselineKind::Uniform => ("uniform", uniform_predictor(max_len)),
        BaselineKind::TrainLabelDist => (
            "train-label-dist",
            EmpiricalLabelDist::from_corpus(&corpus, &train_idx, max_len, a.alpha)?.predictor(),
        ),
    };
    let r = evaluate_nll(&predictor, &corpus, &test)?;
    let report = json!({
        "kind": name,
        "fold": a.fold.fold,
        "split": plan.kind,
        "n_test": test.len(),
        "max_len": max_len,
        "alpha": matches!(a.kind, BaselineKind::TrainLabelDist).then_some(a.alpha),
        "nll": nll_json(&r),
    });
    write_json(&a.out, &report)?;
    m.output(&a.out);
    m.write(&manifest_path(&a.out, false))
}

fn generate_cmd(a: &GenerateArgs, threads: Option<usize>) -> Result<()> {
    let mut m = Manifest::new("generate", threads);
    let any = read_checkpoint(&a.checkpoint, &mut m)?;
    m.hash_file("sentences", &a.sentences)?;
    let sentences = load_sentences(&a.sentences)?;
    m.seed("generation", a.seed);
    let mut out = Vec::new();
    with_checkpoint!(any, c => {
        let emb = read_embeddings(a.embeddings.as_ref(), c.embeddings.as_ref(), &mut m)?;
        m.precision = Some(precision_name(&c));
        for (j, s) in sentences.iter().enumerate() {
            let opts = GenerateOptions {
                max_len: a.max_len,
                n_samples: a.samples,
                seed: sample_seed(a.seed, j as u64),
                mask_invalid: !a.no_mask,
                reader: a.reader.clone(),
            };
            for (i, g) in generate(&c, emb.as_ref(), s, &opts)?.iter().enumerate() {
                let reader = match &a.reader {
                    Some(r) => format!("{r}#{i}"),
                    None => format!("gen{i:05}"),
                };
                out.push(g.to_scanpath(&reader, &s.sentence_id));
            }
        }
    });
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_scanpaths(&a.out, out.iter())?;
    m.output(&a.out);
    m.write(&manifest_path(&a.out, false))
}

fn find_scanpath(corpus: &Corpus, id: &str) -> Result<usize> {
    if let Ok(i) = id.parse::<usize>() {
        return if i < corpus.scanpaths.len() {
            Ok(i)
        } else {
            Err(scanpath::Error::Invalid(format!(
                "no scanpath {i}; the corpus has {}",
                corpus.scanpaths.len()
            ))
            .into())
        };
    }
    let (reader, sentence) = id.split_once('/').ok_or_else(|| {
        usage(format!(
            "scanpath id `{id}` is neither an index nor READER/SENTENCE"
        ))
    })?;
    corpus
        .scanpaths
        .iter()
        .position(|s| s.reader_id == reader && s.sentence_id == sentence)
        .ok_or_else(|| {
            scanpath::Error::Invalid(format!("no scanpath of reader `{reader}` on `{sentence}`"))
                .into()
        })
}

fn inspect(a: &InspectArgs, threads: Option<usize>) -> Result<()> {
    let mut m = Manifest::new("inspect", threads);
    let need = |x: &Option<PathBuf>, flag: &str| {
        x.clone()
            .ok_or_else(|| usage(format!("inspect needs {flag} here")))
    };
    match (&a.scanpath_id, &a.buckets) {
        (Some(id), None) => {
            let out = need(&a.out, "--out")?;
            let any = read_checkpoint(&need(&a.checkpoint, "--checkpoint")?, &mut m)?;
            let corpus = read_corpus(&need(&a.corpus, "--corpus")?, &mut m)?;
            let i = find_scanpath(&corpus, id)?;
            let sentence = corpus.sentence_of(i);
            with_checkpoint!(any, c => {
                let emb = read_embeddings(a.embeddings.as_ref(), c.embeddings.as_ref(), &mut m)?;
                let heat = attention_heatmap(&c, emb.as_ref(), sentence, &corpus.scanpaths[i])?;
                write_heatmap_csv(&out, sentence, &heat)?;
            });
            m.output(&out);
            m.write(&manifest_path(&out, false))
        }
        (None, Some(spec)) => {
            let fold = FoldArgs {
                corpus: need(&a.corpus, "--corpus")?,
                plan: need(&a.plan, "--plan")?,
                fold: a.fold,
            };
            let any = read_checkpoint(&need(&a.checkpoint, "--checkpoint")?, &mut m)?;
            let (corpus, _, train_idx, test) = read_fold(&fold, &mut m)?;
            let mut table = String::from("bucket,steps,model,train_label_dist,uniform\n");
            with_checkpoint!(any, c => {
                let emb = read_embeddings(a.embeddings.as_ref(), c.embeddings.as_ref(), &mut m)?;
                let max_len = c.model.max_len;
                let buckets = parse_buckets(spec, max_len).map_err(|e| usage(e.to_string()))?;
                let model = ModelPredictor::new(&c, emb.as_ref());
                let label = EmpiricalLabelDist::from_corpus(&corpus, &train_idx, max_len, scanpath::eval::DEFAULT_ALPHA)?.predictor();
                let uni = uniform_predictor(max_len);
                let rows: Vec<_> = [&model as &dyn Predictor, &label, &uni]
                    .iter()
                    .map(|p| nll_by_saccade_range(*p, &corpus, &test, &buckets))
                    .collect::<scanpath::Result<_>>()?;
                let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
                for k in 0..buckets.len() {
                    table.push_str(&format!(
                        "\"{}\",{},{},{},{}\n",
                        rows[0][k].label,
                        rows[0][k].steps,
                        fmt(rows[0][k].mean_nll),
                        fmt(rows[1][k].mean_nll),
                        fmt(rows[2][k].mean_nll)
                    ));
                }
            });
            match &a.out {
                Some(out) => {
                    fs::write(out, &table)?;
                    m.output(out);
                    m.write(&manifest_path(out, false))
                }
                None => {
                    print!("{table}");
                    Ok(())
                }
            }
        }
        _ => Err(usage(
            "inspect takes exactly one of --scanpath-id and --buckets",
        )),
    }
}

fn synth(a: &SynthArgs, threads: Option<usize>) -> Result<()> {
    let mut m = Manifest::new("synth", threads);
    m.hash_file("policy", &a.policy)?;
    let spec: SynthSpec = read_json(&a.policy)?;
    m.seed("synth", a.seed);
    let s = generate_synthetic_corpus(&spec, a.readers, a.sentences, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let (sp, pp) = (a.out.join(SENTENCES), a.out.join(SCANPATHS));
    save_corpus(&s.corpus, &sp, &pp)?;
    let info = a.out.join("synth.json");
    write_json(
        &info,
        &json!({"entropy": s.entropy, "reader_policy": s.reader_policy, "scanpaths": s.corpus.scanpaths.len()}),
    )?;
    for p in [&sp, &pp, &info] {
        m.output(p);
    }
    m.write(&manifest_path(&a.out, true))
}

/// The standard ablation matrix: the full model and eight variants.
fn default_grid() -> Value {
    json!({"variants": [
        {"name": "full", "config": {}},
        {"name": "w/o word length", "config": {"use_word_length": false}},
        {"name": "w/o fixation duration", "config": {"use_duration": false}},
        {"name": "w/o landing position", "config": {"use_landing": false}},
        {"name": "w/o gaussian kernel", "config": {"kernel": "none"}},
        {"name": "w/ right skewed gaussian kernel",
         "config": {"window_left": 1, "window_right": 2, "sigma": {"rule": "per_side", "factor": 2.0}}},
        {"name": "w/o local window", "config": {"window_mode": "global"}},
        {"name": "w/o local window, w/o gaussian kernel", "config": {"window_mode": "global", "kernel": "none"}},
        {"name": "w/o word-sequence encoder", "config": {"use_word_encoder": false}}
    ]})
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    s.split('-')
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}

fn ablate(a: &AblateArgs, threads: Option<usize>) -> Result<()> {
    let mut m = Manifest::new("ablate", threads);
    let grid = match &a.grid {
        Some(p) => {
            m.hash_file("grid", p)?;
            read_json::<Value>(p)?
        }
        None => default_grid(),
    };
    let variants = grid["variants"]
        .as_array()
        .filter(|v| !v.is_empty())
        .ok_or_else(|| scanpath::Error::Config("grid needs a non-empty `variants` array".into()))?
        .clone();
    let (corpus, _, train_idx, test) = read_fold(&a.fold, &mut m)?;
    let (base, tc) = model_and_train_config(a.config.as_ref(), a.train_config.as_ref(), &mut m)?;
    m.seed("train", tc.seed);
    m.precision = Some(format!("{:?}", tc.precision).to_lowercase());
    let emb_path = a.embedding.embeddings.as_ref();
    let emb = embeddings_for_training(emb_path, &corpus, &mut m)?;
    let mut rows: Vec<(String, NllReport)> = Vec::new();
    let mut names = BTreeMap::new();
    for v in &variants {
        let name = v["name"]
            .as_str()
            .ok_or_else(|| scanpath::Error::Config("every variant needs a `name`".into()))?
            .to_string();
        let dir = a.out.join(slug(&name));
        if names.insert(slug(&name), name.clone()).is_some() {
            return Err(scanpath::Error::Config(format!("variant names collide: `{name}`")).into());
        }
        let mut cfg = serde_json::to_value(&base)?;
        merge(&mut cfg, v.get("config").unwrap_or(&Value::Null));
        let mc: ModelConfig = serde_json::from_value(cfg).map_err(scanpath::Error::from)?;
        let mut vm = Manifest::new("ablate", threads);
        vm.hash_value("model_config", &mc)?;
        vm.hash_value("train_config", &tc)?;
        vm.seed("train", tc.seed);
        let r = match tc.precision {
            Precision::F32 => {
                let c = train_one::<f32>(&corpus, &train_idx, emb.as_ref(), emb_path, &mc, &tc)?;
                save_run(&c, &dir, &mut vm)?;
                evaluate_nll(&ModelPredictor::new(&c, emb.as_ref()), &corpus, &test)?
            }
            Precision::F64 => {
                let c = train_one::<f64>(&corpus, &train_idx, emb.as_ref(), emb_path, &mc, &tc)?;
                save_run(&c, &dir, &mut vm)?;
                evaluate_nll(&ModelPredictor::new(&c, emb.as_ref()), &corpus, &test)?
            }
        };
        eprintln!("{name}: NLL {:.4} ± {:.4}", r.mean, r.se);
        m.output(&dir);
        rows.push((name, r));
    }
    let reference = rows[0].1.per_scanpath.clone();
    let mut table = String::from("variant,nll,se,t_vs_first,p_vs_first,significantly_worse\n");
    let mut records = Vec::new();
    for (k, (name, r)) in rows.iter().enumerate() {
        let test = (k > 0 && r.per_scanpath.len() >= 2)
            .then(|| paired_ttest(&r.per_scanpath, &reference))
            .transpose()?;
        let worse = test.map(|t| !t.degenerate && t.t > 0.0 && t.p < 0.05);
        let cell = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        table.push_str(&format!(
            "\"{name}\",{},{},{},{},{}\n",
            r.mean,
            r.se,
            cell(test.map(|t| t.t)),
            cell(test.map(|t| t.p)),
            worse.map(|w| w.to_string()).unwrap_or_default()
        ));
        records.push(json!({"variant": name, "nll": r.mean, "se": r.se, "ttest_vs_first": test, "significantly_worse": worse}));
    }
    fs::create_dir_all(&a.out)?;
    let csv = a.out.join("ablation.csv");
    fs::write(&csv, table)?;
    let js = a.out.join("ablation.json");
    write_json(&js, &records)?;
    m.output(&csv);
    m.output(&js);
    m.write(&manifest_path(&a.out, true))
}

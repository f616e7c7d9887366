//! The operations behind the `hat` binary. Every command that writes files
//! also writes a manifest describing its inputs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{corpus_bleu, eval_tokens, evaluate, rouge_l, EvalReport, Metric};
use crate::generation::{generate, GenConfig};
use crate::model::{
    count_parameters, encode_output, hierarchical_delta, load_checkpoint, parameter_breakdown,
    HatConfig, HatParameters, ParamBreakdown,
};
use crate::tensor::Scalar;
use crate::text::dataset::{
    corpus_texts, encode_record, read_encoded, read_jsonl, write_encoded, PassThrough,
    PreprocessConfig, PreprocessMode,
};
use crate::text::{Batch, EncodedExample, Vocabulary, PAD_ID};
use crate::training::{train, OptimizerConfig, Selection, TrainOptions, TrainOutcome};
use crate::viz::{export_trace, AttentionTrace, HeatmapFormat};

/// Resolved description of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub configs: BTreeMap<String, PathBuf>,
    pub seeds: Vec<u64>,
    pub datasets: Vec<PathBuf>,
    pub output: PathBuf,
    /// Flags and overrides as given.
    pub arguments: BTreeMap<String, String>,
    /// SHA-256 over the command, arguments and every input file's bytes,
    /// each file framed as `blob <len>\0<bytes>`.
    pub content_hash: String,
}

impl RunManifest {
    pub fn new(command: &str, output: &Path) -> Self {
        RunManifest {
            command: command.to_owned(),
            configs: BTreeMap::new(),
            seeds: Vec::new(),
            datasets: Vec::new(),
            output: output.to_owned(),
            arguments: BTreeMap::new(),
            content_hash: String::new(),
        }
    }

    pub fn arg(mut self, key: &str, value: impl ToString) -> Self {
        self.arguments.insert(key.to_owned(), value.to_string());
        self
    }

    /// Fills in `content_hash` from the current inputs.
    pub fn seal(mut self) -> Result<Self> {
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        h.update([0]);
        for (k, v) in &self.arguments {
            h.update(format!("{k}={v}\0").as_bytes());
        }
        for s in &self.seeds {
            h.update(s.to_le_bytes());
        }
        let files = self.configs.values().chain(&self.datasets);
        for path in files {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            h.update(format!("blob {}\0", bytes.len()).as_bytes());
            h.update(&bytes);
        }
        self.content_hash = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("manifest", e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Loads a TOML config (or serializes `default` when `path` is `None`),
/// applies `key=value` overrides and deserializes the result. Values are
/// parsed as TOML and fall back to plain strings.
pub fn load_config<T: Serialize + DeserializeOwned>(
    path: Option<&Path>,
    default: &T,
    overrides: &[String],
) -> Result<T> {
    let label = path.map_or_else(|| PathBuf::from("<defaults>"), Path::to_owned);
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Toml {
                path: p.to_owned(),
                source: e,
            })?
        }
        None => toml::Table::try_from(default)
            .map_err(|e| Error::invalid(format!("cannot serialize default config: {e}")))?,
    };
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("override `{o}` is not key=value")))?;
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
        table.insert(key.trim().to_owned(), value);
    }
    T::deserialize(table).map_err(|e| Error::Toml {
        path: label,
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Clone, Debug, Default)]
pub struct PreprocessArgs {
    pub input: PathBuf,
    pub mode: Option<PreprocessMode>,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// Existing vocabulary; built from the input when absent.
    pub vocab: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub records: usize,
    pub examples: usize,
    pub vocab_size: usize,
    pub data: PathBuf,
    pub vocab: PathBuf,
}

/// Encodes a JSONL corpus into `out/data.jsonl` (+ `out/vocab.txt` when
/// the vocabulary is induced here).
pub fn preprocess(args: &PreprocessArgs) -> Result<PreprocessSummary> {
    let default = match args.mode {
        Some(PreprocessMode::Conversation) => PreprocessConfig::conversation(),
        Some(PreprocessMode::Mt) => PreprocessConfig::translation(),
        _ => PreprocessConfig::long_document(),
    };
    let mut cfg: PreprocessConfig = load_config(args.config.as_deref(), &default, &args.overrides)?;
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    let records = read_jsonl(&args.input)?;
    create_dir(&args.out)?;
    let (vocab, vocab_path) = match &args.vocab {
        Some(p) => (Vocabulary::load(p)?, p.clone()),
        None => {
            let v = Vocabulary::build(corpus_texts(&records), cfg.vocab_size, cfg.min_freq);
            let p = args.out.join("vocab.txt");
            v.save(&p)?;
            (v, p)
        }
    };
    let mut examples = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let ex = encode_record(r, &vocab, &cfg, &PassThrough).map_err(|e| {
            Error::invalid(format!("{}: record {}: {e}", args.input.display(), i + 1))
        })?;
        examples.extend(ex);
    }
    let data = args.out.join("data.jsonl");
    write_encoded(&data, &examples)?;

    let mut m = RunManifest::new("preprocess", &args.out)
        .arg("mode", format!("{:?}", cfg.mode))
        .arg("overrides", args.overrides.join(" "));
    m.datasets.push(args.input.clone());
    if let Some(c) = &args.config {
        m.configs.insert("preprocess".into(), c.clone());
    }
    if let Some(v) = &args.vocab {
        m.configs.insert("vocab".into(), v.clone());
    }
    m.seal()?.write(&args.out.join("manifest.json"))?;
    Ok(PreprocessSummary {
        records: records.len(),
        examples: examples.len(),
        vocab_size: vocab.len(),
        data,
        vocab: vocab_path,
    })
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub model_config: PathBuf,
    pub train_config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub train_data: PathBuf,
    pub valid_data: Option<PathBuf>,
    pub out: PathBuf,
    /// Warm start: copies every tensor whose name and shape match.
    pub init_from: Option<PathBuf>,
    /// Needed for selection by ROUGE or BLEU.
    pub vocab: Option<PathBuf>,
    pub gen_config: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub best_step: usize,
    pub best_valid_loss: Option<f64>,
    pub best_score: Option<f64>,
    pub transferred_tensors: Option<usize>,
    pub checkpoint: PathBuf,
}

/// Decodes `data` with `params` and returns the texts.
pub fn decode_texts<T: Scalar>(
    params: &HatParameters<T>,
    data: &[EncodedExample],
    vocab: &Vocabulary,
    gen: &GenConfig,
) -> Result<Vec<String>> {
    data.iter()
        .map(|ex| {
            let enc = encode_output(params, &Batch::single(ex, PAD_ID)?)?;
            let hyp = generate(
                params,
                &enc,
                &GenConfig {
                    trace_attention: false,
                    ..gen.clone()
                },
            )?;
            Ok(vocab.decode(&hyp.tokens))
        })
        .collect()
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let model_cfg = HatConfig::load(&args.model_config)?;
    let opt: OptimizerConfig = load_config(
        args.train_config.as_deref(),
        &OptimizerConfig::desk(),
        &args.overrides,
    )?;
    opt.validate()?;
    let train_set = read_encoded(&args.train_data)?;
    let valid_set = match &args.valid_data {
        Some(p) => read_encoded(p)?,
        None => Vec::new(),
    };
    check_ids(&train_set, model_cfg.vocab_size, &args.train_data)?;
    check_ids(
        &valid_set,
        model_cfg.vocab_size,
        args.valid_data.as_deref().unwrap_or(Path::new("")),
    )?;

    let mut params = HatParameters::<f32>::init(&model_cfg, opt.seed)?;
    let transferred = match &args.init_from {
        Some(p) => {
            let src: HatParameters<f32> = load_checkpoint(p)?;
            Some(params.transfer_from(&src))
        }
        None => None,
    };

    let scorer_env = match opt.selection {
        Selection::Loss => None,
        _ => {
            let vocab_path = args
                .vocab
                .as_ref()
                .ok_or_else(|| Error::invalid("selection by ROUGE or BLEU needs --vocab"))?;
            let gen = match &args.gen_config {
                Some(p) => GenConfig::load(p)?,
                None => GenConfig::translation(model_cfg.max_positions.saturating_sub(1)),
            };
            Some((Vocabulary::load(vocab_path)?, gen))
        }
    };
    let references: Vec<String> = match &scorer_env {
        Some((vocab, _)) => valid_set
            .iter()
            .map(|e| vocab.decode(&e.target_ids))
            .collect(),
        None => Vec::new(),
    };
    let scorer = |p: &HatParameters<f32>| -> Result<f64> {
        let (vocab, gen) = scorer_env
            .as_ref()
            .expect("scorer only used with a metric selection");
        let cands = decode_texts(p, &valid_set, vocab, gen)?;
        let c: Vec<Vec<String>> = cands.iter().map(|s| eval_tokens(s)).collect();
        let r: Vec<Vec<String>> = references.iter().map(|s| eval_tokens(s)).collect();
        match opt.selection {
            Selection::Bleu => Ok(corpus_bleu(&c, &r, 4)?.bleu),
            _ => {
                let mut total = 0.0;
                for (c, r) in c.iter().zip(&r) {
                    total += rouge_l(c, r)?.f1;
                }
                Ok(total / c.len().max(1) as f64)
            }
        }
    };
    let opts = TrainOptions {
        out_dir: Some(args.out.clone()),
        scorer: scorer_env
            .as_ref()
            .map(|_| &scorer as &crate::training::Scorer<'_, f32>),
        stop_below: None,
    };
    let outcome: TrainOutcome<f32> = train(params, &opt, &train_set, &valid_set, &opts)?;

    let mut m = RunManifest::new("train", &args.out).arg("overrides", args.overrides.join(" "));
    m.configs.insert("model".into(), args.model_config.clone());
    if let Some(c) = &args.train_config {
        m.configs.insert("train".into(), c.clone());
    }
    if let Some(c) = &args.init_from {
        m.configs.insert("init_from".into(), c.clone());
    }
    m.seeds.push(opt.seed);
    m.datasets.push(args.train_data.clone());
    m.datasets.extend(args.valid_data.clone());
    m.seal()?.write(&args.out.join("manifest.json"))?;
    Ok(TrainSummary {
        steps: outcome.steps,
        best_step: outcome.best_step,
        best_valid_loss: outcome.best_valid_loss,
        best_score: outcome.best_score,
        transferred_tensors: transferred,
        checkpoint: outcome.best_checkpoint.expect("out_dir was set"),
    })
}

fn check_ids(data: &[EncodedExample], vocab_size: usize, path: &Path) -> Result<()> {
    for (i, ex) in data.iter().enumerate() {
        if let Some(&bad) = ex
            .source_ids
            .iter()
            .chain(&ex.target_ids)
            .find(|&&id| id as usize >= vocab_size)
        {
            return Err(Error::invalid(format!(
                "{}:{}: token id {bad} outside the model vocabulary of {vocab_size}",
                path.display(),
                i + 1
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct GenerateArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub vocab: PathBuf,
    pub gen_config: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// One decoded text per line.
    pub out: PathBuf,
    pub trace_attention: bool,
}

/// Decodes every example; traces go to `{out}.traces/{i}.json`.
pub fn cmd_generate(args: &GenerateArgs) -> Result<usize> {
    let params: HatParameters<f32> = load_checkpoint(&args.checkpoint)?;
    let default = GenConfig::translation(params.config.max_positions.saturating_sub(1));
    let mut gen: GenConfig = load_config(args.gen_config.as_deref(), &default, &args.overrides)?;
    gen.trace_attention |= args.trace_attention;
    gen.validate()?;
    let vocab = Vocabulary::load(&args.vocab)?;
    let data = read_encoded(&args.data)?;
    let trace_dir = trace_dir(&args.out);
    if gen.trace_attention {
        create_dir(&trace_dir)?;
    }
    let mut lines = String::new();
    for (i, ex) in data.iter().enumerate() {
        let batch = Batch::single(ex, PAD_ID)
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", args.data.display(), i + 1)))?;
        let enc = encode_output(&params, &batch)?;
        let hyp = generate(&params, &enc, &gen)?;
        lines.push_str(&vocab.decode(&hyp.tokens));
        lines.push('\n');
        if let Some(trace) = &hyp.trace {
            trace.save(&trace_dir.join(format!("{i}.json")))?;
        }
    }
    fs::write(&args.out, lines).map_err(|e| Error::io(&args.out, e))?;

    let mut m = RunManifest::new("generate", &args.out)
        .arg("trace_attention", gen.trace_attention)
        .arg("overrides", args.overrides.join(" "));
    m.configs
        .insert("checkpoint".into(), args.checkpoint.clone());
    m.configs.insert("vocab".into(), args.vocab.clone());
    if let Some(c) = &args.gen_config {
        m.configs.insert("generation".into(), c.clone());
    }
    m.datasets.push(args.data.clone());
    m.seal()?.write(&sibling(&args.out, "manifest.json"))?;
    Ok(data.len())
}

/// `{out}.traces`
pub fn trace_dir(out: &Path) -> PathBuf {
    sibling(out, "traces")
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".{suffix}"));
    PathBuf::from(s)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)
        .map_err(|e| Error::io(path, e))?
        .lines()
        .map(str::to_owned)
        .collect())
}

#[derive(Clone, Debug)]
pub struct EvaluateArgs {
    pub candidates: PathBuf,
    pub references: PathBuf,
    pub metrics: Vec<Metric>,
    pub out: Option<PathBuf>,
}

/// Scores line-aligned candidate and reference files.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<EvalReport> {
    let cands = read_lines(&args.candidates)?;
    let refs = read_lines(&args.references)?;
    let report = evaluate(&cands, &refs, &args.metrics)?;
    if let Some(out) = &args.out {
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::json("report", e))?;
        let mut f = fs::File::create(out).map_err(|e| Error::io(out, e))?;
        writeln!(f, "{text}").map_err(|e| Error::io(out, e))?;
        let mut m = RunManifest::new("evaluate", out).arg("metrics", format!("{:?}", args.metrics));
        m.datasets.push(args.candidates.clone());
        m.datasets.push(args.references.clone());
        m.seal()?.write(&sibling(out, "manifest.json"))?;
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct HeatmapArgs {
    pub trace: PathBuf,
    /// All layers when `None`.
    pub layer: Option<usize>,
    pub top_k: usize,
    pub format: HeatmapFormat,
    pub out_prefix: PathBuf,
}

pub fn cmd_heatmap(args: &HeatmapArgs) -> Result<Vec<PathBuf>> {
    let trace = AttentionTrace::load(&args.trace)?;
    let layers: Vec<usize> = args.layer.into_iter().collect();
    if let Some(parent) = args
        .out_prefix
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
    {
        create_dir(parent)?;
    }
    export_trace(&trace, &args.out_prefix, &layers, args.top_k, args.format)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub config: HatConfig,
    pub breakdown: ParamBreakdown,
    pub plain: ParamBreakdown,
    pub total: u64,
    pub plain_total: u64,
    /// Scalars the hierarchical components add.
    pub delta: u64,
}

pub fn param_count(cfg: &HatConfig) -> ParamCount {
    let plain = cfg.as_plain();
    ParamCount {
        config: cfg.clone(),
        breakdown: parameter_breakdown(cfg),
        plain: parameter_breakdown(&plain),
        total: count_parameters(cfg),
        plain_total: count_parameters(&plain),
        delta: hierarchical_delta(cfg),
    }
}

pub fn cmd_paramcount(model_config: &Path) -> Result<ParamCount> {
    Ok(param_count(&HatConfig::load(model_config)?))
}

/// Joins translated chunks back into documents: `counts` gives the number
/// of consecutive chunk lines belonging to each document.
pub fn stitch<'a>(
    chunks: impl IntoIterator<Item = &'a str>,
    counts: impl IntoIterator<Item = &'a str>,
) -> Result<String> {
    let mut chunks = chunks.into_iter();
    let mut out = String::new();
    for (i, c) in counts.into_iter().enumerate() {
        let n: usize = c
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("counts line {}: `{c}` is not a count", i + 1)))?;
        let parts: Vec<&str> = chunks.by_ref().take(n).map(str::trim).collect();
        if parts.len() < n {
            return Err(Error::invalid(format!(
                "counts line {}: ran out of chunks",
                i + 1
            )));
        }
        out.push_str(&parts.join(" "));
        out.push('\n');
    }
    if chunks.next().is_some() {
        return Err(Error::invalid("more chunks than the counts cover"));
    }
    Ok(out)
}

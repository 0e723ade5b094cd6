//! End-to-end experiment: extract V_new from the N-best lists, expand the
//! LSTM, then rescore with the KN baseline, the unexpanded LSTM and the
//! expanded LSTM, reporting perplexity and WER for each.
//!
//! Configuration is a flat `key = value` file; `#` starts a comment and
//! relative paths resolve against the file's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use log::info;
use serde::Serialize;
use thiserror::Error;

use super::{
    corpus_edits, load_references, rerank, score_nbest, tune, EditCounts, NBestList, RescoreConfig, RescoreOutcome,
    ScoreError, SentenceScorer, TuneGrid,
};
use crate::expansion::{expand_with_embeddings, extract_oos_words, ExpansionReport, FullVocabLm, UnkPolicy, Weighting};
use crate::ngram::NgramModel;
use crate::rnnlm::{load_checkpoint, save_checkpoint, RnnLm};
use crate::skipgram::WordEmbeddings;
use crate::vocab::Corpus;

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("config: {0}")]
    Missing(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: BoxError,
    },
}

fn stage<E: Into<BoxError>>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        source: e.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub model: PathBuf,
    pub embeddings: PathBuf,
    pub nbest: PathBuf,
    pub references: PathBuf,
    /// KN baseline, read from ARPA...
    pub arpa: Option<PathBuf>,
    /// ...or trained on this corpus over the LSTM's full vocabulary.
    pub ngram_corpus: Option<PathBuf>,
    pub ngram_order: usize,
    pub k: usize,
    pub weighting: Weighting,
    pub nbest_depth: usize,
    pub policy: UnkPolicy,
    pub rescore: RescoreConfig,
    pub dev_nbest: Option<PathBuf>,
    pub dev_references: Option<PathBuf>,
    pub grid: TuneGrid,
    pub depth_study: Vec<usize>,
    pub output_dir: Option<PathBuf>,
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().ok())
        .collect()
}

impl PipelineConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut kv: IndexMap<String, (usize, String)> = IndexMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| PipelineError::Config {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            if kv.insert(k.trim().to_string(), (i + 1, v.trim().to_string())).is_some() {
                return Err(PipelineError::Config {
                    line: i + 1,
                    msg: format!("duplicate key {}", k.trim()),
                });
            }
        }

        let path = |v: &str| base.join(v);
        let mut cfg = PipelineConfig {
            model: PathBuf::new(),
            embeddings: PathBuf::new(),
            nbest: PathBuf::new(),
            references: PathBuf::new(),
            arpa: None,
            ngram_corpus: None,
            ngram_order: 5,
            k: 8,
            weighting: Weighting::Uniform,
            nbest_depth: 1,
            policy: UnkPolicy::Uniform,
            rescore: RescoreConfig::default(),
            dev_nbest: None,
            dev_references: None,
            grid: TuneGrid::default(),
            depth_study: Vec::new(),
            output_dir: None,
        };
        let mut required = ["model", "embeddings", "nbest", "references"]
            .map(|k| (k, false));
        for (key, (line, v)) in &kv {
            let bad = |what: &str| PipelineError::Config {
                line: *line,
                msg: format!("{key}: expected {what}, got {v:?}"),
            };
            match key.as_str() {
                "model" => cfg.model = path(v),
                "embeddings" => cfg.embeddings = path(v),
                "nbest" => cfg.nbest = path(v),
                "references" => cfg.references = path(v),
                "arpa" => cfg.arpa = Some(path(v)),
                "ngram_corpus" => cfg.ngram_corpus = Some(path(v)),
                "ngram_order" => cfg.ngram_order = v.parse().ok().filter(|&o| o > 0).ok_or_else(|| bad("order ≥ 1"))?,
                "k" => cfg.k = v.parse().ok().filter(|&k| k > 0).ok_or_else(|| bad("k ≥ 1"))?,
                "weighting" => {
                    cfg.weighting = match v.as_str() {
                        "uniform" => Weighting::Uniform,
                        "similarity" => Weighting::Similarity,
                        _ => return Err(bad("uniform or similarity")),
                    }
                }
                "nbest_depth" => cfg.nbest_depth = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| bad("n ≥ 1"))?,
                "policy" => cfg.policy = v.parse().map_err(|_| bad("shortlist, uniform or ngram"))?,
                "lm_scale" => cfg.rescore.lm_scale = v.parse().map_err(|_| bad("a number"))?,
                "word_insertion_penalty" => {
                    cfg.rescore.word_insertion_penalty = v.parse().map_err(|_| bad("a number"))?
                }
                "dev_nbest" => cfg.dev_nbest = Some(path(v)),
                "dev_references" => cfg.dev_references = Some(path(v)),
                "tune_lm_scales" => cfg.grid.lm_scales = parse_list(v).ok_or_else(|| bad("comma-separated numbers"))?,
                "tune_penalties" => cfg.grid.penalties = parse_list(v).ok_or_else(|| bad("comma-separated numbers"))?,
                "depth_study" => cfg.depth_study = parse_list(v).ok_or_else(|| bad("comma-separated depths"))?,
                "output_dir" => cfg.output_dir = Some(path(v)),
                _ => {
                    return Err(PipelineError::Config {
                        line: *line,
                        msg: format!("unknown key {key}"),
                    })
                }
            }
            if let Some(r) = required.iter_mut().find(|(k, _)| k == key) {
                r.1 = true;
            }
        }
        if let Some((k, _)) = required.iter().find(|(_, seen)| !seen) {
            return Err(PipelineError::Missing(format!("required key {k} not set")));
        }
        if cfg.arpa.is_none() && cfg.ngram_corpus.is_none() {
            return Err(PipelineError::Missing("one of arpa or ngram_corpus is required".into()));
        }
        if cfg.dev_nbest.is_some() != cfg.dev_references.is_some() {
            return Err(PipelineError::Missing(
                "dev_nbest and dev_references must be given together".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(stage("reading config"))?;
        PipelineConfig::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// Everything the pipeline reads, already in memory.
pub struct PipelineInputs {
    pub model: RnnLm,
    pub embeddings: WordEmbeddings,
    pub nbest: NBestList,
    pub references: IndexMap<String, Vec<String>>,
    pub ngram: NgramModel,
    pub dev: Option<(NBestList, IndexMap<String, Vec<String>>)>,
}

impl PipelineInputs {
    pub fn load(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let model = load_checkpoint(&cfg.model).map_err(stage("loading model"))?;
        let embeddings = WordEmbeddings::load_text(&cfg.embeddings).map_err(stage("loading embeddings"))?;
        let nbest = NBestList::load(&cfg.nbest).map_err(stage("loading n-best lists"))?;
        let references = load_references(&cfg.references).map_err(stage("loading references"))?;
        let ngram = match (&cfg.arpa, &cfg.ngram_corpus) {
            (Some(arpa), _) => NgramModel::import_arpa(arpa).map_err(stage("loading ARPA model"))?,
            (None, Some(corpus)) => {
                let corpus = Corpus::load(corpus).map_err(stage("loading n-gram corpus"))?;
                NgramModel::train(&corpus, model.vocab(), cfg.ngram_order).map_err(stage("training n-gram model"))?
            }
            (None, None) => return Err(PipelineError::Missing("one of arpa or ngram_corpus is required".into())),
        };
        let dev = match (&cfg.dev_nbest, &cfg.dev_references) {
            (Some(n), Some(r)) => Some((
                NBestList::load(n).map_err(stage("loading dev n-best lists"))?,
                load_references(r).map_err(stage("loading dev references"))?,
            )),
            _ => None,
        };
        Ok(PipelineInputs {
            model,
            embeddings,
            nbest,
            references,
            ngram,
            dev,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemRow {
    pub name: String,
    /// Words with an explicit probability (output columns, or n-gram unigrams).
    pub explicit_words: usize,
    pub perplexity: f64,
    pub wer: f64,
    pub edits: EditCounts,
    pub rescore: RescoreConfig,
    pub tuned: bool,
    pub failed_utterances: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthRow {
    pub n: usize,
    pub v_new: usize,
    pub in_embeddings: usize,
    pub expanded: usize,
    pub skipped: usize,
    pub perplexity: f64,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub nbest_depth: usize,
    pub k: usize,
    pub weighting: Weighting,
    pub policy: UnkPolicy,
    pub v_new: Vec<String>,
    pub expansion: ExpansionReport,
    pub reference_tokens: usize,
    /// Reference tokens (end-of-sentence excluded) outside the shortlist,
    /// before and after expansion.
    pub reference_oos_before: usize,
    pub reference_oos_after: usize,
    pub systems: Vec<SystemRow>,
    pub depth_study: Vec<DepthRow>,
}

impl PipelineReport {
    pub fn system(&self, name: &str) -> Option<&SystemRow> {
        self.systems.iter().find(|s| s.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>9} {:>11} {:>8}", "system", "|V_expl|", "perplexity", "WER%");
        for r in &self.systems {
            let _ = writeln!(
                s,
                "{:<10} {:>9} {:>11.3} {:>8.2}",
                r.name, r.explicit_words, r.perplexity, r.wer
            );
        }
        if !self.depth_study.is_empty() {
            let _ = writeln!(s, "\n{:>5} {:>7} {:>9} {:>11} {:>8}", "n", "|V_new|", "expanded", "perplexity", "WER%");
            for d in &self.depth_study {
                let _ = writeln!(
                    s,
                    "{:>5} {:>7} {:>9} {:>11.3} {:>8.2}",
                    d.n, d.v_new, d.expanded, d.perplexity, d.wer
                );
            }
        }
        s
    }
}

/// Natural-log perplexity over reference sentences, end-of-sentence included.
pub fn corpus_perplexity(
    lm: &dyn SentenceScorer,
    references: &IndexMap<String, Vec<String>>,
) -> Result<f64, ScoreError> {
    let (mut total, mut tokens) = (0.0, 0usize);
    for words in references.values() {
        total += lm.score_sentence(words)?;
        tokens += words.len() + 1;
    }
    if tokens == 0 {
        return Err("no reference tokens".into());
    }
    Ok((-total / tokens as f64).exp())
}

struct Evaluated {
    row: SystemRow,
    ranked: RescoreOutcome,
}

fn evaluate(
    name: &str,
    lm: &dyn SentenceScorer,
    explicit_words: usize,
    inputs: &PipelineInputs,
    cfg: &PipelineConfig,
) -> Result<Evaluated, PipelineError> {
    let perplexity = corpus_perplexity(lm, &inputs.references).map_err(stage("perplexity"))?;
    let (rescore_cfg, tuned) = match &inputs.dev {
        Some((dev_nbest, dev_refs)) => {
            let scored = score_nbest(dev_nbest, lm);
            let best = tune(&scored, dev_refs, &cfg.grid).map_err(stage("tuning"))?;
            info!(
                "{name}: tuned lm_scale {} penalty {} (dev WER {:.2}%)",
                best.config.lm_scale, best.config.word_insertion_penalty, best.wer
            );
            (best.config, true)
        }
        None => (cfg.rescore, false),
    };
    let ranked = rerank(&score_nbest(&inputs.nbest, lm), &rescore_cfg);
    let edits = corpus_edits(&inputs.references, &ranked.list.best()).map_err(stage("scoring WER"))?;
    info!("{name}: perplexity {perplexity:.3}, WER {:.2}%", edits.wer_percent());
    Ok(Evaluated {
        row: SystemRow {
            name: name.to_string(),
            explicit_words,
            perplexity,
            wer: edits.wer_percent(),
            edits,
            rescore: rescore_cfg,
            tuned,
            failed_utterances: ranked.failures.iter().map(|f| f.utterance.clone()).collect(),
        },
        ranked,
    })
}

fn oos_tokens(model: &RnnLm, references: &IndexMap<String, Vec<String>>) -> usize {
    references
        .values()
        .flatten()
        .filter(|w| !model.vocab().in_shortlist(w))
        .count()
}

/// Runs the experiment on in-memory inputs. Nothing is written.
pub fn run_on(inputs: &PipelineInputs, cfg: &PipelineConfig) -> Result<(PipelineReport, RnnLm), PipelineError> {
    let base = &inputs.model;
    let ngram = (cfg.policy == UnkPolicy::Ngram).then_some(&inputs.ngram);

    let kn = evaluate("KN", &inputs.ngram, inputs.ngram.vocab().len() - 1, inputs, cfg)?;

    let lstm_lm = FullVocabLm::new(base, cfg.policy, ngram).map_err(stage("unexpanded LSTM"))?;
    let lstm = evaluate("LSTM", &lstm_lm, base.columns(), inputs, cfg)?;

    let expand = |n: usize| -> Result<(Vec<String>, RnnLm, ExpansionReport), PipelineError> {
        let v_new = extract_oos_words(&inputs.nbest, base.vocab(), n);
        let (model, report) = expand_with_embeddings(base, &inputs.embeddings, &v_new, cfg.k, cfg.weighting)
            .map_err(stage("expansion"))?;
        Ok((v_new, model, report))
    };

    let (v_new, expanded, expansion) = expand(cfg.nbest_depth)?;
    info!(
        "V_new has {} words; {} expanded, {} skipped",
        v_new.len(),
        expansion.expanded.len(),
        expansion.skipped.len()
    );
    let ve_lm = FullVocabLm::new(&expanded, cfg.policy, ngram).map_err(stage("expanded LSTM"))?;
    let ve = evaluate("VE-LSTM", &ve_lm, expanded.columns(), inputs, cfg)?;

    let mut depth_study = Vec::new();
    for &n in &cfg.depth_study {
        let (words, model, report) = expand(n)?;
        let lm = FullVocabLm::new(&model, cfg.policy, ngram).map_err(stage("depth study"))?;
        let e = evaluate(&format!("VE-LSTM n={n}"), &lm, model.columns(), inputs, cfg)?;
        depth_study.push(DepthRow {
            n,
            v_new: words.len(),
            in_embeddings: words.iter().filter(|w| inputs.embeddings.contains(w)).count(),
            expanded: report.expanded.len(),
            skipped: report.skipped.len(),
            perplexity: e.row.perplexity,
            wer: e.row.wer,
        });
    }

    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir).map_err(stage("writing outputs"))?;
        for (file, e) in [("kn.nbest", &kn), ("lstm.nbest", &lstm), ("ve-lstm.nbest", &ve)] {
            e.ranked.list.save(dir.join(file)).map_err(stage("writing outputs"))?;
        }
        save_checkpoint(&expanded, dir.join("expanded.ckpt")).map_err(stage("writing outputs"))?;
    }

    let report = PipelineReport {
        nbest_depth: cfg.nbest_depth,
        k: cfg.k,
        weighting: cfg.weighting,
        policy: cfg.policy,
        v_new,
        reference_tokens: inputs.references.values().map(Vec::len).sum(),
        reference_oos_before: oos_tokens(base, &inputs.references),
        reference_oos_after: oos_tokens(&expanded, &inputs.references),
        expansion,
        systems: vec![kn.row, lstm.row, ve.row],
        depth_study,
    };
    if let Some(dir) = &cfg.output_dir {
        let json = serde_json::to_string_pretty(&report).map_err(stage("writing outputs"))?;
        fs::write(dir.join("report.json"), json).map_err(stage("writing outputs"))?;
    }
    Ok((report, expanded))
}

pub fn run(cfg: &PipelineConfig) -> Result<PipelineReport, PipelineError> {
    let inputs = PipelineInputs::load(cfg)?;
    Ok(run_on(&inputs, cfg)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let text = "# experiment\nmodel = m.ckpt\nembeddings = e.txt\nnbest = t.nbest\n\
                    references = t.ref\narpa = /abs/kn.arpa\nk = 4  # neighbours\n\
                    policy = ngram\ndepth_study = 1, 5,50\ntune_penalties = -1,0\n";
        let cfg = PipelineConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.model, PathBuf::from("/base/m.ckpt"));
        assert_eq!(cfg.arpa, Some(PathBuf::from("/abs/kn.arpa")));
        assert_eq!(cfg.k, 4);
        assert_eq!(cfg.policy, UnkPolicy::Ngram);
        assert_eq!(cfg.depth_study, vec![1, 5, 50]);
        assert_eq!(cfg.grid.penalties, vec![-1.0, 0.0]);
        assert_eq!(cfg.grid.lm_scales.len(), 10);
    }

    #[test]
    fn config_errors() {
        let base = Path::new(".");
        assert!(matches!(
            PipelineConfig::parse("model = a\nbogus = 1\n", base),
            Err(PipelineError::Config { line: 2, .. })
        ));
        assert!(matches!(
            PipelineConfig::parse("model = a\nembeddings = b\nnbest = c\nreferences = d\n", base),
            Err(PipelineError::Missing(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("model = a\nk = zero\n", base),
            Err(PipelineError::Config { line: 2, .. })
        ));
        assert!(matches!(
            PipelineConfig::parse("model = a\nmodel = b\n", base),
            Err(PipelineError::Config { line: 2, .. })
        ));
    }
}

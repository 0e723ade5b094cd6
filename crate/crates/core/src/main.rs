use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use indexmap::IndexMap;

use velm::expansion::{expand_with_embeddings, extract_oos_words, FullVocabLm, UnkPolicy, Weighting};
use velm::ngram::NgramModel;
use velm::rescore::pipeline::{self, corpus_perplexity, PipelineConfig};
use velm::rescore::{
    corpus_edits, load_references, rerank, score_nbest, tune, NBestList, RescoreConfig, SentenceScorer, TuneGrid,
};
use velm::rnnlm::{load_checkpoint, save_checkpoint, train_bptt, ModelDims, RnnLm, TrainConfig};
use velm::skipgram::{train_skipgram, SkipGramConfig, WordEmbeddings};
use velm::synth::{Fixture, FixtureConfig};
use velm::vocab::{Corpus, Vocabulary};

#[derive(Parser)]
#[command(name = "velm", version, about = "Shortlist LSTM LM with vocabulary expansion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct LmArgs {
    /// LSTM checkpoint; without it the ARPA model is used
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "uniform")]
    unk_mode: UnkPolicy,
    /// Vocabulary whose shortlist matches the model's, with a larger tail
    #[arg(long)]
    full_vocab: Option<PathBuf>,
    #[arg(long)]
    arpa: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a frequency-ranked vocabulary
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        shortlist: usize,
        /// Size of the full vocabulary (defaults to every corpus word)
        #[arg(long)]
        full: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an interpolated modified Kneser-Ney model and write ARPA
    BuildNgram {
        #[arg(long)]
        order: usize,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the shortlist LSTM
    TrainLm {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 32)]
        ds: usize,
        #[arg(long, default_value_t = 64)]
        dh: usize,
        #[arg(long, default_value_t = 10)]
        unroll: usize,
        #[arg(long, default_value_t = 0.5)]
        dropout: f64,
        #[arg(long, default_value_t = 1.0)]
        lr: f64,
        #[arg(long, default_value_t = 5.0)]
        clip: f64,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0.05)]
        init_scale: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perplexity of a text under the LSTM (full-vocabulary) or ARPA model
    Ppl {
        #[arg(long)]
        text: PathBuf,
        #[command(flatten)]
        lm: LmArgs,
    },
    /// Train skip-gram embeddings (word2vec text format)
    TrainSkipgram {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 100)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        window: usize,
        #[arg(long, default_value_t = 5)]
        negatives: usize,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nearest in-shortlist neighbours of a word
    Neighbors {
        #[arg(long)]
        vec: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        word: String,
        #[arg(long, default_value_t = 8)]
        k: usize,
    },
    /// Collect out-of-shortlist words from the top-n hypotheses
    ExtractOos {
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add synthesized columns for new words to a trained model
    Expand {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vec: PathBuf,
        #[arg(long)]
        oos: PathBuf,
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Weight candidates by cosine similarity instead of equally
        #[arg(long)]
        weighted: bool,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rerank N-best lists with a language model
    Rescore {
        #[arg(long)]
        nbest: PathBuf,
        #[command(flatten)]
        lm: LmArgs,
        #[arg(long, default_value_t = 1.0)]
        lm_scale: f64,
        #[arg(long, default_value_t = 0.0)]
        penalty: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Word error rate of the first hypothesis of each utterance
    Wer {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        nbest: PathBuf,
    },
    /// Grid search for LM scale and word insertion penalty
    Tune {
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[command(flatten)]
        lm: LmArgs,
        /// Comma-separated LM scales
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        /// Comma-separated word insertion penalties
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        penalties: Option<Vec<f64>>,
    },
    /// Run the full extract / expand / rescore experiment
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Write the JSON report here instead of stdout
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate the synthetic corpus and N-best fixture
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200_000)]
        train_tokens: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        /// Acoustic penalty per edit
        #[arg(long, default_value_t = 1.0)]
        edit_cost: f64,
        /// Half-width of the uniform acoustic noise
        #[arg(long, default_value_t = 3.0)]
        noise: f64,
    },
}

struct LoadedLm {
    rnn: Option<RnnLm>,
    ngram: Option<NgramModel>,
    policy: UnkPolicy,
}

impl LoadedLm {
    fn load(args: &LmArgs) -> Result<Self> {
        let ngram = match &args.arpa {
            Some(p) => Some(NgramModel::import_arpa(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        let rnn = match &args.model {
            Some(p) => {
                let model = load_checkpoint(p).with_context(|| format!("reading {}", p.display()))?;
                Some(match &args.full_vocab {
                    Some(v) => with_full_vocab(model, Vocabulary::load(v)?)?,
                    None => model,
                })
            }
            None => None,
        };
        if rnn.is_none() && ngram.is_none() {
            bail!("give --model or --arpa");
        }
        Ok(LoadedLm {
            rnn,
            ngram,
            policy: args.unk_mode,
        })
    }

    fn with_scorer<T>(&self, f: impl FnOnce(&dyn SentenceScorer) -> Result<T>) -> Result<T> {
        match (&self.rnn, &self.ngram) {
            (Some(rnn), ngram) => {
                let lm = FullVocabLm::new(rnn, self.policy, ngram.as_ref())?;
                f(&lm)
            }
            (None, Some(ngram)) => f(ngram),
            (None, None) => unreachable!("checked in load"),
        }
    }
}

fn with_full_vocab(model: RnnLm, vocab: Vocabulary) -> Result<RnnLm> {
    let cols = model.columns();
    if vocab.shortlist_size() != cols || vocab.words()[..cols] != model.vocab().words()[..cols] {
        bail!("--full-vocab must share the model's shortlist ({} words)", cols);
    }
    Ok(RnnLm::from_parts(
        vocab,
        model.input_embeddings().clone(),
        model.layers().to_vec(),
        model.output_embeddings().clone(),
        model.output_bias().to_vec(),
    )?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::BuildVocab {
            corpus,
            shortlist,
            full,
            out: path,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let full = full.unwrap_or_else(|| corpus.counts().len() + 3);
            let vocab = Vocabulary::build(&corpus, shortlist, full)?;
            vocab.save(&path)?;
            writeln!(out, "{} words, shortlist {}", vocab.len(), vocab.shortlist_size())?;
        }
        Command::BuildNgram {
            order,
            corpus,
            vocab,
            out: path,
        } => {
            let model = NgramModel::train(&Corpus::load(&corpus)?, &Vocabulary::load(&vocab)?, order)?;
            model.export_arpa(&path)?;
        }
        Command::TrainLm {
            corpus,
            vocab,
            valid,
            layers,
            ds,
            dh,
            unroll,
            dropout,
            lr,
            clip,
            epochs,
            batch,
            init_scale,
            seed,
            out: path,
        } => {
            let train = Corpus::load(&corpus)?;
            let valid = valid.map(Corpus::load).transpose()?;
            let model = RnnLm::random(
                Vocabulary::load(&vocab)?,
                ModelDims { layers, d_s: ds, d_h: dh },
                init_scale,
                seed,
            );
            let cfg = TrainConfig {
                unroll,
                dropout,
                lr,
                clip,
                epochs,
                seed,
                batch,
                ..TrainConfig::default()
            };
            let (model, report) = train_bptt(&model, &train, valid.as_ref(), &cfg)?;
            for e in &report.epochs {
                writeln!(out, "{}", serde_json::to_string(e)?)?;
            }
            save_checkpoint(&model, &path)?;
        }
        Command::Ppl { text, lm } => {
            let refs: IndexMap<String, Vec<String>> = Corpus::load(&text)?
                .sentences()
                .iter()
                .enumerate()
                .map(|(i, s)| (i.to_string(), s.clone()))
                .collect();
            let ppl = LoadedLm::load(&lm)?.with_scorer(|s| corpus_perplexity(s, &refs).map_err(anyhow::Error::from_boxed))?;
            writeln!(out, "{ppl:.4}")?;
        }
        Command::TrainSkipgram {
            corpus,
            dim,
            window,
            negatives,
            epochs,
            seed,
            out: path,
        } => {
            let cfg = SkipGramConfig {
                dim,
                window,
                negatives,
                epochs,
                seed,
                ..SkipGramConfig::default()
            };
            train_skipgram(&Corpus::load(&corpus)?, &cfg)?.save_text(&path)?;
        }
        Command::Neighbors { vec, vocab, word, k } => {
            let emb = WordEmbeddings::load_text(&vec)?;
            for n in emb.nearest_in_shortlist(&word, &Vocabulary::load(&vocab)?, k)? {
                writeln!(out, "{}\t{}\t{:.6}", n.word, n.id, n.similarity)?;
            }
        }
        Command::ExtractOos { nbest, vocab, n, out: path } => {
            let words = extract_oos_words(&NBestList::load(&nbest)?, &Vocabulary::load(&vocab)?, n);
            let mut text = words.join("\n");
            if !words.is_empty() {
                text.push('\n');
            }
            fs::write(&path, text)?;
            writeln!(out, "{} words", words.len())?;
        }
        Command::Expand {
            model,
            vec,
            oos,
            k,
            weighted,
            report,
            out: path,
        } => {
            let model = load_checkpoint(&model)?;
            let emb = WordEmbeddings::load_text(&vec)?;
            let words: Vec<String> = fs::read_to_string(&oos)?.split_whitespace().map(str::to_owned).collect();
            let weighting = if weighted { Weighting::Similarity } else { Weighting::Uniform };
            let (expanded, rep) = expand_with_embeddings(&model, &emb, &words, k, weighting)?;
            save_checkpoint(&expanded, &path)?;
            let json = serde_json::to_string_pretty(&rep)?;
            match report {
                Some(p) => fs::write(p, json)?,
                None => writeln!(out, "{json}")?,
            }
        }
        Command::Rescore {
            nbest,
            lm,
            lm_scale,
            penalty,
            out: path,
        } => {
            let list = NBestList::load(&nbest)?;
            let cfg = RescoreConfig {
                lm_scale,
                word_insertion_penalty: penalty,
            };
            let ranked = LoadedLm::load(&lm)?.with_scorer(|s| Ok(rerank(&score_nbest(&list, s), &cfg)))?;
            for f in &ranked.failures {
                writeln!(out, "failed\t{}\t{}", f.utterance, f.error)?;
            }
            ranked.list.save(&path)?;
        }
        Command::Wer { reference, nbest } => {
            let refs = load_references(&reference)?;
            let edits = corpus_edits(&refs, &NBestList::load(&nbest)?.best())?;
            writeln!(
                out,
                "WER {:.2}% (S {} I {} D {} / N {})",
                edits.wer_percent(),
                edits.substitutions,
                edits.insertions,
                edits.deletions,
                edits.reference_words
            )?;
        }
        Command::Tune {
            nbest,
            reference,
            lm,
            scales,
            penalties,
        } => {
            let list = NBestList::load(&nbest)?;
            let refs = load_references(&reference)?;
            let mut grid = TuneGrid::default();
            if let Some(s) = scales {
                grid.lm_scales = s;
            }
            if let Some(p) = penalties {
                grid.penalties = p;
            }
            let best = LoadedLm::load(&lm)?.with_scorer(|s| Ok(tune(&score_nbest(&list, s), &refs, &grid)?))?;
            writeln!(out, "{}", serde_json::to_string_pretty(&best)?)?;
        }
        Command::Pipeline { config, report } => {
            let cfg = PipelineConfig::load(&config)?;
            let rep = pipeline::run(&cfg)?;
            eprint!("{}", rep.to_table());
            let json = serde_json::to_string_pretty(&rep)?;
            match report {
                Some(p) => fs::write(p, json)?,
                None => writeln!(out, "{json}")?,
            }
        }
        Command::MakeFixture {
            out: dir,
            train_tokens,
            seed,
            edit_cost,
            noise,
        } => {
            let mut cfg = FixtureConfig {
                train_tokens,
                seed,
                ..FixtureConfig::default()
            };
            cfg.noise.edit_cost = edit_cost;
            cfg.noise.noise = noise;
            Fixture::generate(&cfg).write(&dir)?;
            writeln!(out, "fixture written to {}", dir.display())?;
        }
    }
    Ok(())
}

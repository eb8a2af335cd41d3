//! Corpus ingestion, vocabulary, contiguous batching, and perplexity
//! evaluation (mask-free and Monte-Carlo sequence averaging).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::MaskSet;
use crate::model::{forward, Carry, LmModel};
use crate::tensor::Tape;

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Word,
    Char,
}

/// Token↔id map; ids 0 and 1 are reserved for `<unk>` and `<eos>`.
#[derive(Debug, Clone)]
pub struct Vocab {
    to_id: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Built from the train split only: specials first, then tokens by
    /// descending frequency, ties broken lexicographically.
    fn build(counts: &HashMap<String, usize>) -> Vocab {
        let mut tokens = vec![UNK.to_string(), EOS.to_string()];
        let mut rest: Vec<(&String, &usize)> = counts
            .iter()
            .filter(|(t, _)| t.as_str() != UNK && t.as_str() != EOS)
            .collect();
        rest.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        tokens.extend(rest.into_iter().map(|(t, _)| t.clone()));
        let to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { to_id, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        *self.to_id.get(token).unwrap_or(&0)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }
}

/// Token id sequences for the three splits plus their shared vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub vocab: Vocab,
    pub mode: Mode,
}

fn tokenize(text: &str, mode: Mode) -> Vec<String> {
    match mode {
        Mode::Word => {
            let mut out = Vec::new();
            for line in text.lines() {
                out.extend(line.split_whitespace().map(str::to_string));
                out.push(EOS.to_string());
            }
            out
        }
        Mode::Char => text.chars().map(|c| c.to_string()).collect(),
    }
}

/// Load `train.txt`, `valid.txt`, `test.txt` from `dir`. The vocabulary
/// comes from train alone; out-of-vocabulary tokens elsewhere map to
/// `<unk>`.
pub fn load_corpus(dir: &Path, mode: Mode) -> Result<Corpus> {
    let read = |name: &str| -> Result<String> {
        fs::read_to_string(dir.join(name))
            .map_err(|e| Error::Corpus(format!("{}: {e}", dir.join(name).display())))
    };
    let train_toks = tokenize(&read("train.txt")?, mode);
    if train_toks.is_empty() {
        return Err(Error::Corpus(format!(
            "empty train split in {}",
            dir.display()
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in &train_toks {
        *counts.entry(t.clone()).or_default() += 1;
    }
    let vocab = Vocab::build(&counts);
    let encode = |toks: Vec<String>| -> Vec<usize> { toks.iter().map(|t| vocab.id(t)).collect() };
    let train = encode(train_toks);
    let valid = encode(tokenize(&read("valid.txt")?, mode));
    let test = encode(tokenize(&read("test.txt")?, mode));
    Ok(Corpus {
        train,
        valid,
        test,
        vocab,
        mode,
    })
}

/// One TBPTT window: step-major inputs and next-token targets, each
/// `steps x batch`.
#[derive(Debug, Clone)]
pub struct Window {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

/// Contiguous column-wise batchify of an id stream. Column b holds the
/// b-th contiguous chunk of `rows` tokens; trailing tokens that do not
/// fill all columns are dropped.
#[derive(Debug, Clone)]
pub struct BatchStream {
    cols: Vec<Vec<usize>>,
    tbptt: usize,
}

impl BatchStream {
    pub fn new(ids: &[usize], batch: usize, tbptt: usize) -> Result<Self> {
        if batch == 0 || tbptt == 0 {
            return Err(Error::Config("batch and tbptt must be >= 1".into()));
        }
        let rows = ids.len() / batch;
        if rows < 2 {
            return Err(Error::Corpus(format!(
                "split of {} tokens too short for batch size {batch}",
                ids.len()
            )));
        }
        let cols = (0..batch)
            .map(|b| ids[b * rows..(b + 1) * rows].to_vec())
            .collect();
        Ok(BatchStream { cols, tbptt })
    }

    pub fn batch(&self) -> usize {
        self.cols.len()
    }

    pub fn rows(&self) -> usize {
        self.cols[0].len()
    }

    /// Number of windows per epoch.
    pub fn num_windows(&self) -> usize {
        (self.rows() - 2) / self.tbptt + 1
    }

    /// The w-th window; consecutive windows are contiguous so carried
    /// state is meaningful. The final window may be shorter.
    pub fn window(&self, w: usize) -> Window {
        let start = w * self.tbptt;
        let steps = self.tbptt.min(self.rows() - 1 - start);
        let grab = |off: usize| {
            (0..steps)
                .map(|t| self.cols.iter().map(|c| c[start + t + off]).collect())
                .collect()
        };
        Window {
            inputs: grab(0),
            targets: grab(1),
        }
    }

    /// Concatenated columns: the original stream minus the dropped
    /// remainder.
    pub fn unbatchify(&self) -> Vec<usize> {
        self.cols.concat()
    }
}

/// exp(mean token cross-entropy) under the expected (all-ones) masks,
/// with carried state threaded through the whole split.
pub fn perplexity(model: &LmModel, ids: &[usize], batch: usize, tbptt: usize) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::Corpus("cannot evaluate an empty split".into()));
    }
    let stream = BatchStream::new(ids, batch, tbptt)?;
    let sites = model.mask_sites(batch);
    let masks = MaskSet::expected(&sites);
    let mut carry = Carry::zero(&model.config, batch);
    let mut total_ce = 0.0;
    let mut tokens = 0usize;
    for w in 0..stream.num_windows() {
        let win = stream.window(w);
        let mut tape = Tape::new(0);
        let bound = model.bind(&mut tape);
        let (outs, next) = forward(&mut tape, model, &bound, &win.inputs, &masks, &carry)?;
        for (out, tgt) in outs.iter().zip(&win.targets) {
            let ce = tape.cross_entropy(out.logits, tgt)?;
            total_ce += tape.data(ce)[0];
            tokens += tgt.len();
        }
        carry = next;
    }
    Ok((total_ce / tokens as f64).exp())
}

/// Monte-Carlo sequence averaging: K independently masked evaluations of
/// the same text, per-step probability vectors averaged post-softmax,
/// targets scored against the average. Each mask thread carries its own
/// hidden state.
pub fn mc_eval(
    model: &LmModel,
    ids: &[usize],
    batch: usize,
    tbptt: usize,
    k: usize,
    seed: u64,
) -> Result<f64> {
    mc_eval_seeded(model, ids, batch, tbptt, k, |w, thread| {
        seed ^ (w as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ (thread as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
    })
}

/// `mc_eval` with an explicit per-(window, thread) mask seed; forcing all
/// threads to one seed must reproduce K=1 exactly.
pub fn mc_eval_seeded(
    model: &LmModel,
    ids: &[usize],
    batch: usize,
    tbptt: usize,
    k: usize,
    thread_seed: impl Fn(usize, usize) -> u64,
) -> Result<f64> {
    if k < 1 {
        return Err(Error::Config("mc_eval needs K >= 1".into()));
    }
    if ids.is_empty() {
        return Err(Error::Corpus("cannot evaluate an empty split".into()));
    }
    let stream = BatchStream::new(ids, batch, tbptt)?;
    let sites = model.mask_sites(batch);
    let vocab = model.config.vocab_size;
    let mut carries = vec![Carry::zero(&model.config, batch); k];
    let mut total = 0.0;
    let mut tokens = 0usize;
    for w in 0..stream.num_windows() {
        let win = stream.window(w);
        let steps = win.inputs.len();
        // avg_probs[t] is (batch x vocab), averaged over the K threads
        let mut avg = vec![vec![0.0; batch * vocab]; steps];
        for (thread, carry) in carries.iter_mut().enumerate() {
            let masks = MaskSet::sample(&sites, steps, thread_seed(w, thread))?;
            let mut tape = Tape::new(0);
            let bound = model.bind(&mut tape);
            let (outs, next) = forward(&mut tape, model, &bound, &win.inputs, &masks, carry)?;
            for (t, out) in outs.iter().enumerate() {
                let probs = tape.softmax_rows(out.logits);
                for (a, p) in avg[t].iter_mut().zip(probs.data()) {
                    *a += p / k as f64;
                }
            }
            *carry = next;
        }
        for (t, tgt) in win.targets.iter().enumerate() {
            for (b, &y) in tgt.iter().enumerate() {
                total -= avg[t][b * vocab + y].ln();
                tokens += 1;
            }
        }
    }
    Ok((total / tokens as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{DropScheme, Granularity};
    use crate::model::{DropConfig, LmConfig};
    use crate::oracle::scalar_forward;
    use std::io::Write;

    fn write_corpus(dir: &Path, train: &str, valid: &str, test: &str) {
        for (name, body) in [("train.txt", train), ("valid.txt", valid), ("test.txt", test)] {
            let mut f = fs::File::create(dir.join(name)).unwrap();
            f.write_all(body.as_bytes()).unwrap();
        }
    }

    #[test]
    fn word_vocab_is_deterministic_and_frequency_ordered() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), "a a b\n", "a c\n", "b\n");
        let c = load_corpus(dir.path(), Mode::Word).unwrap();
        assert_eq!(c.vocab.len(), 4); // <unk> <eos> a b
        assert_eq!(c.vocab.id(UNK), 0);
        assert_eq!(c.vocab.id(EOS), 1);
        assert_eq!(c.vocab.id("a"), 2);
        assert_eq!(c.vocab.id("b"), 3);
        assert_eq!(c.train, vec![2, 2, 3, 1]);
        // "c" is absent from train: maps to <unk>
        assert_eq!(c.valid, vec![2, 0, 1]);
    }

    #[test]
    fn frequency_ties_break_lexicographically() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), "b a b a z\n", "a\n", "a\n");
        let c = load_corpus(dir.path(), Mode::Word).unwrap();
        assert_eq!(c.vocab.id("a"), 2);
        assert_eq!(c.vocab.id("b"), 3);
        assert_eq!(c.vocab.id("z"), 4);
    }

    #[test]
    fn char_mode_has_no_eos_per_line() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), "ab", "a", "b");
        let c = load_corpus(dir.path(), Mode::Char).unwrap();
        assert_eq!(c.vocab.len(), 4); // specials + a + b
        assert_eq!(c.train.len(), 2);
        assert!(!c.train.contains(&1));
    }

    #[test]
    fn missing_file_and_empty_train_are_clean_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_corpus(dir.path(), Mode::Word),
            Err(Error::Corpus(_))
        ));
        write_corpus(dir.path(), "", "x\n", "x\n");
        assert!(matches!(
            load_corpus(dir.path(), Mode::Word),
            Err(Error::Corpus(_))
        ));
    }

    #[test]
    fn batchify_columns_are_contiguous_and_remainder_dropped() {
        let ids: Vec<usize> = (0..11).collect();
        let s = BatchStream::new(&ids, 2, 3).unwrap();
        assert_eq!(s.rows(), 5);
        assert_eq!(s.unbatchify(), (0..10).collect::<Vec<_>>());
        let w0 = s.window(0);
        assert_eq!(w0.inputs, vec![vec![0, 5], vec![1, 6], vec![2, 7]]);
        assert_eq!(w0.targets, vec![vec![1, 6], vec![2, 7], vec![3, 8]]);
        let w1 = s.window(1);
        assert_eq!(w1.inputs, vec![vec![3, 8]]);
        assert_eq!(w1.targets, vec![vec![4, 9]]);
        assert_eq!(s.num_windows(), 2);
    }

    #[test]
    fn batchify_rejects_too_short_split() {
        assert!(BatchStream::new(&[1, 2, 3], 2, 4).is_err());
        assert!(BatchStream::new(&[1, 2, 3], 0, 4).is_err());
    }

    fn tiny_model(drop: DropConfig, seed: u64) -> LmModel {
        LmModel::init(
            LmConfig {
                vocab_size: 5,
                embed_dim: 3,
                hidden_dim: 3,
                num_layers: 1,
                tie_embeddings: true,
                drop,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zero_model_perplexity_equals_vocab_size() {
        let mut model = tiny_model(DropConfig::none(), 0);
        for p in model.params.iter_mut() {
            p.value.fill(0.0);
        }
        let ids: Vec<usize> = (0..40).map(|i| i % 5).collect();
        let ppl = perplexity(&model, &ids, 2, 7).unwrap();
        assert!((ppl - 5.0).abs() < 1e-12);
    }

    #[test]
    fn perplexity_matches_scalar_recomputation() {
        // B=1 so the stream is one contiguous column; the scalar oracle
        // re-runs the whole prefix for every step's logits.
        let model = tiny_model(DropConfig::none(), 9);
        let ids: Vec<usize> = vec![0, 3, 1, 4, 2, 2, 0, 1, 3, 4, 1];
        let ppl = perplexity(&model, &ids, 1, 4).unwrap();
        let masks = MaskSet::expected(&model.mask_sites(1));
        let logits = scalar_forward(&model, &ids[..ids.len() - 1], &masks).unwrap();
        let mut total = 0.0;
        for (t, row) in logits.iter().enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|l| (l - mx).exp()).sum();
            total -= row[ids[t + 1]] - mx - z.ln();
        }
        let expected = (total / (ids.len() - 1) as f64).exp();
        assert!(
            (ppl - expected).abs() <= 1e-12 * expected,
            "{ppl} vs {expected}"
        );
    }

    #[test]
    fn windowed_perplexity_independent_of_tbptt() {
        // carried state makes the windowing invisible to the metric
        let model = tiny_model(DropConfig::none(), 5);
        let ids: Vec<usize> = (0..60).map(|i| (i * 7 + 3) % 5).collect();
        let a = perplexity(&model, &ids, 3, 19).unwrap();
        let b = perplexity(&model, &ids, 3, 4).unwrap();
        assert!((a - b).abs() < 1e-9 * a);
    }

    fn droppy() -> DropConfig {
        let per = |rate| DropScheme {
            rate,
            granularity: Granularity::PerStep,
        };
        DropConfig {
            input: per(0.3),
            inter_layer: per(0.0),
            output: per(0.3),
            embedding: DropScheme {
                rate: 0.2,
                granularity: Granularity::EmbeddingRow,
            },
            weight: DropScheme {
                rate: 0.2,
                granularity: Granularity::WeightMatrix,
            },
        }
    }

    #[test]
    fn mc_eval_rate_zero_equals_mask_free() {
        let model = tiny_model(DropConfig::none(), 3);
        let ids: Vec<usize> = (0..30).map(|i| (i * 3 + 1) % 5).collect();
        let plain = perplexity(&model, &ids, 2, 6).unwrap();
        for k in [1, 4] {
            let mc = mc_eval(&model, &ids, 2, 6, k, 77).unwrap();
            assert!((mc - plain).abs() < 1e-12 * plain);
        }
    }

    #[test]
    fn mc_eval_identical_threads_equals_k1() {
        let model = tiny_model(droppy(), 4);
        let ids: Vec<usize> = (0..30).map(|i| (i * 11 + 2) % 5).collect();
        let k1 = mc_eval_seeded(&model, &ids, 2, 6, 1, |w, _| 1000 + w as u64).unwrap();
        let k5 = mc_eval_seeded(&model, &ids, 2, 6, 5, |w, _| 1000 + w as u64).unwrap();
        assert!((k1 - k5).abs() < 1e-9 * k1, "{k1} vs {k5}");
    }

    #[test]
    fn mc_eval_is_deterministic_and_rejects_k0() {
        let model = tiny_model(droppy(), 4);
        let ids: Vec<usize> = (0..30).map(|i| (i * 11 + 2) % 5).collect();
        let a = mc_eval(&model, &ids, 2, 6, 3, 9).unwrap();
        let b = mc_eval(&model, &ids, 2, 6, 3, 9).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(mc_eval(&model, &ids, 2, 6, 0, 9).is_err());
    }

    #[test]
    fn averaged_probability_rows_sum_to_one() {
        // direct check of the probability-domain averaging invariant
        let model = tiny_model(droppy(), 8);
        let sites = model.mask_sites(2);
        let win_inputs: Vec<Vec<usize>> = vec![vec![0, 1], vec![2, 3]];
        let mut avg = vec![vec![0.0; 2 * 5]; 2];
        let k = 4;
        for thread in 0..k {
            let masks = MaskSet::sample(&sites, 2, thread as u64).unwrap();
            let mut tape = Tape::new(0);
            let bound = model.bind(&mut tape);
            let carry = Carry::zero(&model.config, 2);
            let (outs, _) =
                forward(&mut tape, &model, &bound, &win_inputs, &masks, &carry).unwrap();
            for (t, out) in outs.iter().enumerate() {
                for (a, p) in avg[t].iter_mut().zip(tape.softmax_rows(out.logits).data()) {
                    *a += p / k as f64;
                }
            }
        }
        for row in avg.iter().flat_map(|t| t.chunks(5)) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

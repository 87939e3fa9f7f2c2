//! Users, MBTI labels, dataset ingestion, leakage filtering and splitting.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::tokenize;
use crate::error::{Error, Result};

/// One of the four MBTI axes, in the fixed order EI, SN, TF, JP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    EI,
    SN,
    TF,
    JP,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::EI, Axis::SN, Axis::TF, Axis::JP];

    /// Letters of the axis; index 0 is the first pole, index 1 the second.
    pub fn letters(self) -> [char; 2] {
        match self {
            Axis::EI => ['E', 'I'],
            Axis::SN => ['S', 'N'],
            Axis::TF => ['T', 'F'],
            Axis::JP => ['J', 'P'],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Column header used in reports, e.g. "E/I".
    pub fn header(self) -> &'static str {
        match self {
            Axis::EI => "E/I",
            Axis::SN => "S/N",
            Axis::TF => "T/F",
            Axis::JP => "J/P",
        }
    }
}

/// A full MBTI type. Each axis stores the pole as 0 (E, S, T, J) or 1 (I, N, F, P).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MbtiLabel {
    poles: [u8; 4],
}

impl MbtiLabel {
    pub fn from_poles(poles: [bool; 4]) -> Self {
        MbtiLabel {
            poles: poles.map(u8::from),
        }
    }

    /// 0 for the first letter of the axis, 1 for the second.
    pub fn pole(&self, axis: Axis) -> usize {
        self.poles[axis.index()] as usize
    }

    pub fn letter(&self, axis: Axis) -> char {
        axis.letters()[self.pole(axis)]
    }

    /// Index in `[0, 16)`: `8·[I] + 4·[N] + 2·[F] + [P]`.
    pub fn type_index(&self) -> usize {
        self.poles
            .iter()
            .fold(0usize, |acc, &bit| (acc << 1) | bit as usize)
    }

    pub fn from_type_index(index: usize) -> Result<Self> {
        if index >= 16 {
            return Err(Error::TypeIndexOutOfRange(index));
        }
        Ok(MbtiLabel {
            poles: [3, 2, 1, 0].map(|shift| ((index >> shift) & 1) as u8),
        })
    }

    pub fn code(&self) -> String {
        Axis::ALL.iter().map(|&a| self.letter(a)).collect()
    }
}

impl FromStr for MbtiLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let chars: Vec<char> = s.trim().chars().map(|c| c.to_ascii_uppercase()).collect();
        if chars.len() != 4 {
            return Err(Error::InvalidLabel(s.to_string()));
        }
        let mut poles = [0u8; 4];
        for (axis, (&c, pole)) in Axis::ALL.iter().zip(chars.iter().zip(poles.iter_mut())) {
            *pole = match axis.letters().iter().position(|&l| l == c) {
                Some(p) => p as u8,
                None => return Err(Error::InvalidLabel(s.to_string())),
            };
        }
        Ok(MbtiLabel { poles })
    }
}

impl fmt::Display for MbtiLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl Serialize for MbtiLabel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.code())
    }
}

impl<'de> Deserialize<'de> for MbtiLabel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One user's posts, grouped into token-ID batches, plus the label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSample {
    pub user_id: String,
    pub label: MbtiLabel,
    pub batches: Vec<Vec<u32>>,
}

impl UserSample {
    pub fn batch_count(&self) -> usize {
        self.batches.len()
    }
}

/// Options applied while reading a dataset file.
#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub posts_per_batch: usize,
    pub vocab_bits: u32,
    /// Leak terms to strip from raw posts; `None` leaves posts untouched.
    pub lexicon: Option<LeakLexicon>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            posts_per_batch: 8,
            vocab_bits: 20,
            lexicon: None,
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Record {
    Tokens {
        user_id: String,
        batches: Vec<Vec<u32>>,
        label: String,
    },
    Raw {
        user_id: String,
        posts: Vec<String>,
        label: String,
    },
}

/// Reads a dataset-JSONL file.
///
/// Lines carrying `posts` are raw records: they are leak-filtered (when a
/// lexicon is configured), grouped `posts_per_batch` at a time and tokenized.
/// Lines carrying `batches` are already tokenized and are taken as-is. Empty
/// batches are dropped; a user left with no batch is skipped with a warning.
pub fn parse_dataset(path: &Path, opts: &IngestOptions) -> Result<Vec<UserSample>> {
    if opts.posts_per_batch == 0 {
        return Err(Error::Config("posts_per_batch must be at least 1".into()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let (user_id, batches, label) = match record {
            Record::Tokens {
                user_id,
                batches,
                label,
            } => (user_id, batches, label),
            Record::Raw {
                user_id,
                posts,
                label,
            } => {
                let posts = match &opts.lexicon {
                    Some(lex) => filter_label_leakage(&posts, lex),
                    None => posts,
                };
                let batches = posts
                    .chunks(opts.posts_per_batch)
                    .map(|chunk| tokenize(&chunk.join(" "), opts.vocab_bits))
                    .collect();
                (user_id, batches, label)
            }
        };
        let label: MbtiLabel = label
            .parse()
            .map_err(|_| parse_err(format!("unknown label {label:?}")))?;
        let batches: Vec<Vec<u32>> = batches.into_iter().filter(|b| !b.is_empty()).collect();
        if batches.is_empty() {
            log::warn!("{}:{line_no}: user {user_id} has no tokens left, skipped", path.display());
            continue;
        }
        samples.push(UserSample {
            user_id,
            label,
            batches,
        });
    }
    Ok(samples)
}

/// Writes samples as token-level dataset-JSONL (`user_id`, `label`, `batches`).
#[derive(Deserialize)]
struct LabelRecord {
    user_id: String,
    label: String,
}

/// Reads only `user_id` and `label` from each dataset-JSONL line, in file
/// order. Used when batch embeddings come from a separate file.
pub fn parse_labels(path: &Path) -> Result<Vec<(String, MbtiLabel)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let label = rec
            .label
            .parse()
            .map_err(|_| parse_err(format!("unknown label {:?}", rec.label)))?;
        if !seen.insert(rec.user_id.clone()) {
            return Err(parse_err(format!("duplicate user {}", rec.user_id)));
        }
        out.push((rec.user_id, label));
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, samples: &[UserSample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for sample in samples {
        let line = serde_json::to_string(sample).expect("sample serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Case-folded set of words that give away a user's label.
#[derive(Clone, Debug, Default)]
pub struct LeakLexicon {
    terms: HashSet<String>,
}

impl LeakLexicon {
    pub fn new<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        LeakLexicon {
            terms: terms.into_iter().map(|t| t.as_ref().to_lowercase()).collect(),
        }
    }

    /// The 16 type codes plus the eight axis adjectives.
    pub fn default_terms() -> Self {
        let codes = (0..16).map(|i| MbtiLabel::from_type_index(i).unwrap().code());
        let words = [
            "extravert",
            "introvert",
            "sensing",
            "intuitive",
            "thinking",
            "feeling",
            "judging",
            "perceiving",
        ];
        let mut lex = LeakLexicon::new(codes);
        lex.extend(words);
        lex
    }

    pub fn extend<I, S>(&mut self, terms: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.terms
            .extend(terms.into_iter().map(|t| t.as_ref().to_lowercase()));
    }

    pub fn contains(&self, token: &str) -> bool {
        self.terms.contains(&token.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

/// Drops every whitespace-delimited token whose case-folded form is a leak
/// term. Surviving tokens are re-joined with single spaces.
pub fn filter_label_leakage(posts: &[String], lexicon: &LeakLexicon) -> Vec<String> {
    posts
        .iter()
        .map(|post| {
            post.split_whitespace()
                .filter(|tok| !lexicon.contains(tok))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// Train/validation/test fractions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config(format!("split ratios out of [0, 1]: {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must sum to 1: {parts:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
    pub seed: u64,
    pub ratios: SplitRatios,
}

/// Seeded shuffle followed by floor cuts at `n·r_train` and
/// `n·(r_train + r_val)`; the remainder is the test part.
pub fn split_dataset<T: Clone>(samples: &[T], ratios: SplitRatios, seed: u64) -> Result<DatasetSplit<T>> {
    ratios.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("dataset to split"));
    }
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut_train = ((n as f64) * ratios.train).floor() as usize;
    let cut_val = (((n as f64) * (ratios.train + ratios.validation)).floor() as usize).clamp(cut_train, n);
    let pick = |range: &[usize]| range.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Ok(DatasetSplit {
        train: pick(&order[..cut_train]),
        validation: pick(&order[cut_train..cut_val]),
        test: pick(&order[cut_val..]),
        seed,
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn parses_minimal_record() {
        let f = write_lines(&[r#"{"user_id":"u1","posts":["hello world"],"label":"INTJ"}"#]);
        let samples = parse_dataset(f.path(), &IngestOptions::default()).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].batch_count(), 1);
        assert_eq!(samples[0].label.code(), "INTJ");
        assert_eq!(samples[0].label.letter(Axis::EI), 'I');
        assert_eq!(samples[0].label.letter(Axis::JP), 'J');
    }

    #[test]
    fn empty_file_gives_no_samples() {
        let f = write_lines(&[]);
        assert!(parse_dataset(f.path(), &IngestOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn bad_label_names_the_line() {
        let f = write_lines(&[r#"{"user_id":"u1","posts":["x"],"label":"XNTJ"}"#]);
        let err = parse_dataset(f.path(), &IngestOptions::default()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_names_the_line() {
        let f = write_lines(&[
            r#"{"user_id":"u1","posts":["x"],"label":"ESTJ"}"#,
            r#"{"user_id":"#,
        ]);
        let err = parse_dataset(f.path(), &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = parse_dataset(Path::new("/nonexistent/x.jsonl"), &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn posts_are_grouped_per_batch() {
        let f = write_lines(&[r#"{"user_id":"u","posts":["a","b","c","d","e"],"label":"ENFP"}"#]);
        let opts = IngestOptions {
            posts_per_batch: 2,
            ..Default::default()
        };
        let s = &parse_dataset(f.path(), &opts).unwrap()[0];
        assert_eq!(s.batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
    }

    #[test]
    fn token_records_round_trip() {
        let sample = UserSample {
            user_id: "u9".into(),
            label: "ISFP".parse().unwrap(),
            batches: vec![vec![1, 2, 3], vec![4]],
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        write_dataset(f.path(), std::slice::from_ref(&sample)).unwrap();
        let back = parse_dataset(f.path(), &IngestOptions::default()).unwrap();
        assert_eq!(back, vec![sample]);
    }

    #[test]
    fn leak_filter_examples() {
        let lex = LeakLexicon::default_terms();
        let run = |s: &str| filter_label_leakage(&[s.to_string()], &lex);
        assert_eq!(run("I am INTJ truly"), vec!["I am truly"]);
        assert_eq!(run("no leak here"), vec!["no leak here"]);
        assert_eq!(run("intj speaking"), vec!["speaking"]);
        assert_eq!(run("Introvert and EXTRAVERT"), vec!["and"]);
        assert!(filter_label_leakage(&[], &lex).is_empty());
    }

    #[test]
    fn default_lexicon_size() {
        assert_eq!(LeakLexicon::default_terms().len(), 24);
    }

    #[test]
    fn codec_fixed_points() {
        assert_eq!("ESTJ".parse::<MbtiLabel>().unwrap().type_index(), 0);
        assert_eq!("INFP".parse::<MbtiLabel>().unwrap().type_index(), 15);
        assert_eq!("ENTP".parse::<MbtiLabel>().unwrap().type_index(), 5);
        assert!(matches!(
            MbtiLabel::from_type_index(16),
            Err(Error::TypeIndexOutOfRange(16))
        ));
    }

    #[test]
    fn codec_round_trip() {
        for i in 0..16 {
            let label = MbtiLabel::from_type_index(i).unwrap();
            assert_eq!(label.type_index(), i);
            assert_eq!(label.code().len(), 4);
            assert_eq!(label.code().parse::<MbtiLabel>().unwrap(), label);
        }
    }

    #[test]
    fn split_sizes() {
        let ten: Vec<u32> = (0..10).collect();
        let s = split_dataset(&ten, SplitRatios::default(), 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (6, 2, 2));
        let again = split_dataset(&ten, SplitRatios::default(), 7).unwrap();
        assert_eq!(s, again);

        let seven: Vec<u32> = (0..7).collect();
        let s = split_dataset(&seven, SplitRatios::default(), 7).unwrap();
        // floor(4.2) = 4, floor(5.6) = 5
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (4, 1, 2));
    }

    #[test]
    fn split_rejects_bad_input() {
        let bad = SplitRatios {
            train: 0.5,
            validation: 0.2,
            test: 0.2,
        };
        assert!(matches!(split_dataset(&[1, 2], bad, 0), Err(Error::Config(_))));
        let empty: [u8; 0] = [];
        assert!(matches!(
            split_dataset(&empty, SplitRatios::default(), 0),
            Err(Error::Empty(_))
        ));
    }

    proptest! {
        #[test]
        fn split_partitions(n in 1usize..200, seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (train, rest) = (a, 1.0 - a);
            let ratios = SplitRatios { train, validation: rest * b, test: 1.0 - train - rest * b };
            let items: Vec<usize> = (0..n).collect();
            let s = split_dataset(&items, ratios, seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
            prop_assert_eq!(all.len(), n);
            all.sort_unstable();
            prop_assert_eq!(all, items);
        }

        #[test]
        fn leak_filter_idempotent(words in proptest::collection::vec("[a-zA-Z]{1,6}|INTJ|enfp|Introvert", 0..12)) {
            let lex = LeakLexicon::default_terms();
            let posts = vec![words.join(" ")];
            let once = filter_label_leakage(&posts, &lex);
            prop_assert_eq!(filter_label_leakage(&once, &lex), once);
        }
    }

    #[test]
    fn labels_only_parse_ignores_payload() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"user_id":"a","label":"INTJ","posts":["x"]}}"#).unwrap();
        writeln!(f, r#"{{"user_id":"b","label":"esfp"}}"#).unwrap();
        let got = parse_labels(f.path()).unwrap();
        assert_eq!(got[0], ("a".to_string(), "INTJ".parse().unwrap()));
        assert_eq!(got[1].1.code(), "ESFP");
        writeln!(f, r#"{{"user_id":"a","label":"INTJ"}}"#).unwrap();
        assert!(matches!(parse_labels(f.path()), Err(Error::Parse { line: 3, .. })));
    }
}

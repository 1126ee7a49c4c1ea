//! Corpus ingestion, the synthetic one-to-many corpus generator, and
//! mini-batching.
//!
//! The synthetic corpus gives every post `R` responses, one per deterministic
//! mode function, so the one-to-many structure (and which mode produced each
//! response) is known exactly. That makes mapping-module specialization
//! measurable without human annotation.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::{Vocab, BOS, EOS, PAD};

/// Untokenized post/response pair as stored in corpus files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPair {
    pub post: String,
    pub response: String,
    pub mode: Option<usize>,
}

/// Token-id pair ready for the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PostResponsePair {
    pub post: Vec<usize>,
    pub response: Vec<usize>,
    pub mode: Option<usize>,
}

/// A padded mini-batch. Response rows are stored as
/// `BOS y_1 .. y_T' EOS PAD..`; `response_lens` counts BOS and EOS.
#[derive(Debug, Clone)]
pub struct Batch {
    pub posts: Vec<Vec<usize>>,
    pub post_lens: Vec<usize>,
    pub responses: Vec<Vec<usize>>,
    pub response_lens: Vec<usize>,
    pub modes: Vec<Option<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    /// Post tokens without padding.
    pub fn post(&self, i: usize) -> &[usize] {
        &self.posts[i][..self.post_lens[i]]
    }

    /// Decoder input: `BOS y_1 .. y_T'`.
    pub fn decoder_input(&self, i: usize) -> &[usize] {
        &self.responses[i][..self.response_lens[i] - 1]
    }

    /// Decoder targets: `y_1 .. y_T' EOS`.
    pub fn decoder_target(&self, i: usize) -> &[usize] {
        &self.responses[i][1..self.response_lens[i]]
    }

    /// Response tokens without BOS/EOS/padding.
    pub fn bare_response(&self, i: usize) -> &[usize] {
        &self.responses[i][1..self.response_lens[i] - 1]
    }
}

// ---- corpus files ----------------------------------------------------------

/// Parse `post<TAB>response[<TAB>mode]` lines. Truly empty lines are
/// skipped; anything else with the wrong field count is rejected with its
/// 1-based line number.
pub fn read_corpus(r: impl BufRead) -> Result<Vec<RawPair>> {
    let mut pairs = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::MalformedCorpusLine { line: idx + 1, found: fields.len() });
        }
        let mode = match fields.get(2) {
            Some(m) => Some(m.parse::<usize>().map_err(|_| Error::BadCorpusLine {
                line: idx + 1,
                details: format!("mode label `{m}` is not an integer"),
            })?),
            None => None,
        };
        pairs.push(RawPair {
            post: fields[0].to_string(),
            response: fields[1].to_string(),
            mode,
        });
    }
    Ok(pairs)
}

pub fn write_corpus(pairs: &[RawPair], w: &mut impl Write) -> Result<()> {
    for p in pairs {
        match p.mode {
            Some(m) => writeln!(w, "{}\t{}\t{}", p.post, p.response, m)?,
            None => writeln!(w, "{}\t{}", p.post, p.response)?,
        }
    }
    Ok(())
}

pub fn load_corpus(path: &std::path::Path) -> Result<Vec<RawPair>> {
    let f = std::fs::File::open(path)?;
    read_corpus(std::io::BufReader::new(f))
}

// ---- synthetic corpus --------------------------------------------------------

const ALPHABET: [&str; 10] = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"];
const QUESTION_PREFIX: [&str; 2] = ["what", "about"];
const OPINION_PREFIX: [&str; 2] = ["i", "think"];
const EXTRA_PREFIXES: [&str; 4] = ["indeed", "well", "hmm", "oh"];

/// Number of implemented mode functions.
pub const NUM_MODES: usize = 4 + EXTRA_PREFIXES.len();

/// The deterministic response for `mode` given the post tokens.
pub fn mode_response(mode: usize, post: &[&str]) -> Vec<String> {
    match mode {
        0 => post.iter().map(|t| t.to_string()).collect(),
        1 => post.iter().rev().map(|t| t.to_string()).collect(),
        2 => QUESTION_PREFIX
            .iter()
            .copied()
            .chain(post.iter().copied())
            .chain(std::iter::once("?"))
            .map(str::to_string)
            .collect(),
        3 => OPINION_PREFIX
            .iter()
            .copied()
            .chain(std::iter::once(post[0]))
            .map(str::to_string)
            .collect(),
        m => std::iter::once(EXTRA_PREFIXES[m - 4])
            .chain(post.iter().copied())
            .map(str::to_string)
            .collect(),
    }
}

/// Generate `num_posts` distinct random posts and emit `modes` responses per
/// post, one per mode function, each pair labeled with its mode.
pub fn synth_corpus(num_posts: usize, modes: usize, seed: u64) -> Result<Vec<RawPair>> {
    if modes < 2 {
        return Err(Error::BadConfig(format!("need at least 2 modes, got {modes}")));
    }
    if modes > NUM_MODES {
        return Err(Error::TooManyModes { requested: modes, max: NUM_MODES });
    }
    if num_posts == 0 {
        return Err(Error::BadConfig("need at least one post".into()));
    }
    let mut rng = rng::stream(seed, "synth-corpus");
    let mut seen = HashSet::new();
    let mut posts: Vec<Vec<&str>> = Vec::with_capacity(num_posts);
    let mut attempts = 0usize;
    while posts.len() < num_posts {
        attempts += 1;
        if attempts > num_posts.saturating_mul(1000) {
            return Err(Error::BadConfig(format!(
                "cannot generate {num_posts} distinct posts over a {}-token alphabet",
                ALPHABET.len()
            )));
        }
        let len = rng.gen_range(3..=8);
        let toks: Vec<&str> = (0..len)
            .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())])
            .collect();
        if seen.insert(toks.join(" ")) {
            posts.push(toks);
        }
    }
    let mut pairs = Vec::with_capacity(num_posts * modes);
    for post in &posts {
        let post_text = post.join(" ");
        for mode in 0..modes {
            pairs.push(RawPair {
                post: post_text.clone(),
                response: mode_response(mode, post).join(" "),
                mode: Some(mode),
            });
        }
    }
    Ok(pairs)
}

// ---- encoding and batching -----------------------------------------------------

/// Tokenize and encode raw pairs. Sequences longer than `max_len` are
/// truncated with a warning; empty posts or responses are rejected.
pub fn encode_pairs(raw: &[RawPair], vocab: &Vocab, max_len: usize) -> Result<Vec<PostResponsePair>> {
    let mut out = Vec::with_capacity(raw.len());
    for (idx, pair) in raw.iter().enumerate() {
        let mut post = vocab.encode(&pair.post);
        let mut response = vocab.encode(&pair.response);
        if post.is_empty() || response.is_empty() {
            return Err(Error::BadCorpusLine {
                line: idx + 1,
                details: "empty post or response".into(),
            });
        }
        if post.len() > max_len {
            log::warn!("pair {}: post truncated from {} to {max_len} tokens", idx + 1, post.len());
            post.truncate(max_len);
        }
        if response.len() > max_len {
            log::warn!(
                "pair {}: response truncated from {} to {max_len} tokens",
                idx + 1,
                response.len()
            );
            response.truncate(max_len);
        }
        out.push(PostResponsePair { post, response, mode: pair.mode });
    }
    Ok(out)
}

/// Deterministically shuffled mini-batches; the final partial batch is kept.
pub fn batches(pairs: &[PostResponsePair], batch_size: usize, shuffle_seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::BadConfig("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    use rand::seq::SliceRandom;
    let mut rng = rng::stream(shuffle_seed, "batch-shuffle");
    order.shuffle(&mut rng);

    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        let max_post = chunk.iter().map(|&i| pairs[i].post.len()).max().unwrap_or(1);
        let max_resp = chunk.iter().map(|&i| pairs[i].response.len() + 2).max().unwrap_or(3);
        let mut batch = Batch {
            posts: Vec::with_capacity(chunk.len()),
            post_lens: Vec::with_capacity(chunk.len()),
            responses: Vec::with_capacity(chunk.len()),
            response_lens: Vec::with_capacity(chunk.len()),
            modes: Vec::with_capacity(chunk.len()),
        };
        for &i in chunk {
            let p = &pairs[i];
            let mut post = p.post.clone();
            batch.post_lens.push(post.len());
            post.resize(max_post, PAD);
            batch.posts.push(post);

            let mut resp = Vec::with_capacity(max_resp);
            resp.push(BOS);
            resp.extend_from_slice(&p.response);
            resp.push(EOS);
            batch.response_lens.push(resp.len());
            resp.resize(max_resp, PAD);
            batch.responses.push(resp);
            batch.modes.push(p.mode);
        }
        out.push(batch);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mode_one_reverses_the_post() {
        assert_eq!(mode_response(1, &["a", "b", "c"]), vec!["c", "b", "a"]);
    }

    #[test]
    fn mode_two_wraps_with_question_tokens() {
        assert_eq!(
            mode_response(2, &["a", "b"]),
            vec!["what", "about", "a", "b", "?"]
        );
    }

    #[test]
    fn mode_three_uses_first_token() {
        assert_eq!(mode_response(3, &["d", "e", "f"]), vec!["i", "think", "d"]);
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let a = synth_corpus(20, 4, 9).unwrap();
        let b = synth_corpus(20, 4, 9).unwrap();
        assert_eq!(a, b);
        let c = synth_corpus(20, 4, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_counting_oracle() {
        let pairs = synth_corpus(500, 4, 3).unwrap();
        assert_eq!(pairs.len(), 2000);
        let mut per_post: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
        for p in &pairs {
            *per_post.entry(p.post.as_str()).or_insert(0) += 1;
        }
        assert_eq!(per_post.len(), 500);
        assert!(per_post.values().all(|&n| n == 4));
    }

    #[test]
    fn synth_rejects_unimplemented_modes() {
        assert!(matches!(
            synth_corpus(5, NUM_MODES + 1, 0),
            Err(Error::TooManyModes { .. })
        ));
        assert!(synth_corpus(5, 1, 0).is_err());
    }

    #[test]
    fn corpus_file_roundtrip_and_line_errors() {
        let pairs = synth_corpus(5, 3, 1).unwrap();
        let mut buf = Vec::new();
        write_corpus(&pairs, &mut buf).unwrap();
        let back = read_corpus(&buf[..]).unwrap();
        assert_eq!(pairs, back);

        let bad = b"a b\tc d\nonly one field\n";
        match read_corpus(&bad[..]) {
            Err(Error::MalformedCorpusLine { line, found }) => {
                assert_eq!(line, 2);
                assert_eq!(found, 1);
            }
            other => panic!("expected malformed line error, got {other:?}"),
        }

        let bad_mode = b"a\tb\tnot_a_number\n";
        assert!(matches!(
            read_corpus(&bad_mode[..]),
            Err(Error::BadCorpusLine { line: 1, .. })
        ));
    }

    #[test]
    fn batch_sizes_and_padding() {
        let raw = synth_corpus(5, 2, 2).unwrap();
        let vocab = Vocab::build(&raw, 100).unwrap();
        let pairs = encode_pairs(&raw, &vocab, 50).unwrap();
        assert_eq!(pairs.len(), 10);
        let bs = batches(&pairs, 4, 0).unwrap();
        assert_eq!(bs.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);

        for b in &bs {
            for i in 0..b.len() {
                // padding only after true length
                assert!(b.posts[i][b.post_lens[i]..].iter().all(|&t| t == PAD));
                assert!(b.responses[i][b.response_lens[i]..].iter().all(|&t| t == PAD));
                assert_eq!(b.responses[i][0], BOS);
                assert_eq!(b.responses[i][b.response_lens[i] - 1], EOS);
            }
        }
    }

    #[test]
    fn same_shuffle_seed_gives_identical_order() {
        let raw = synth_corpus(10, 2, 5).unwrap();
        let vocab = Vocab::build(&raw, 100).unwrap();
        let pairs = encode_pairs(&raw, &vocab, 50).unwrap();
        let a = batches(&pairs, 3, 7).unwrap();
        let b = batches(&pairs, 3, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.posts, y.posts);
            assert_eq!(x.responses, y.responses);
        }
    }

    #[test]
    fn batch_rows_decode_back_to_source_pairs() {
        let raw = synth_corpus(8, 3, 4).unwrap();
        let vocab = Vocab::build(&raw, 100).unwrap();
        let pairs = encode_pairs(&raw, &vocab, 50).unwrap();
        let bs = batches(&pairs, 5, 1).unwrap();
        let mut seen = Vec::new();
        for b in &bs {
            for i in 0..b.len() {
                seen.push((vocab.decode(b.post(i)), vocab.decode(b.bare_response(i))));
            }
        }
        seen.sort();
        let mut expect: Vec<(String, String)> = raw
            .iter()
            .map(|p| (p.post.clone(), p.response.clone()))
            .collect();
        expect.sort();
        assert_eq!(seen, expect);
    }

    #[test]
    fn truncation_applies_max_len() {
        let raw = vec![RawPair { post: "a b c d e".into(), response: "a".into(), mode: None }];
        let vocab = Vocab::build(&raw, 100).unwrap();
        let pairs = encode_pairs(&raw, &vocab, 3).unwrap();
        assert_eq!(pairs[0].post.len(), 3);
    }

    proptest! {
        // mode 3 is keyed to the first post token only and is deliberately
        // not injective; all other modes embed the whole post.
        #[test]
        fn injective_modes_distinguish_posts(a in proptest::sample::subsequence(
            vec!["a","b","c","d","e","f","g","h"], 3..8,
        ), shift in 1usize..5) {
            let b: Vec<&str> = a.iter().cycle().skip(shift).take(a.len()).copied().collect();
            prop_assume!(a != b);
            for mode in (0..NUM_MODES).filter(|&m| m != 3) {
                prop_assert_ne!(mode_response(mode, &a), mode_response(mode, &b));
            }
        }

        #[test]
        fn reserved_ids_never_assigned(posts in proptest::collection::vec("[a-z]{1,4}( [a-z]{1,4}){0,5}", 1..20)) {
            let raw: Vec<RawPair> = posts.iter().map(|p| RawPair {
                post: p.clone(), response: p.clone(), mode: None,
            }).collect();
            let vocab = Vocab::build(&raw, 64).unwrap();
            for tok in raw.iter().flat_map(|p| p.post.split_whitespace()) {
                prop_assert!(vocab.id(tok) >= 4 || vocab.id(tok) == crate::vocab::UNK);
            }
        }
    }
}

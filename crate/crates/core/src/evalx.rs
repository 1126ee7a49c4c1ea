//! Automatic metrics (BLEU-1/2, Dist-1/2), mapping-module diagnostics
//! (selection statistics, keyword extraction, representation export), and
//! the synthetic-task mode-coverage scorer.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::data::{mode_response, PostResponsePair};
use crate::decoder::{generate, generate_all, DecodeMode, MappingChoice};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::ModelParams;
use crate::multimap::map_all;
use crate::recurrent::{encode_post, encode_response};
use crate::rng;
use crate::scalar::Scalar;
use crate::selector::{argmax, posterior_distribution, project_response};
use crate::vocab::Vocab;

// ---- BLEU and Dist -----------------------------------------------------------

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level BLEU-n: order-n modified precision with clipping, add-1
/// smoothing on the counts for n = 2, and the brevity penalty
/// `exp(1 - r/c)` when the hypothesis is shorter than the reference.
pub fn bleu_n(hypothesis: &[String], reference: &[String], n: usize) -> f64 {
    assert!(n == 1 || n == 2, "bleu_n supports n in {{1, 2}}");
    if hypothesis.is_empty() {
        return 0.0;
    }
    let hyp_counts = ngram_counts(hypothesis, n);
    let ref_counts = ngram_counts(reference, n);
    let total: usize = hyp_counts.values().sum();
    let clipped: usize = hyp_counts
        .iter()
        .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    let precision = if n == 2 {
        (clipped + 1) as f64 / (total + 1) as f64
    } else if total == 0 {
        0.0
    } else {
        clipped as f64 / total as f64
    };
    let c = hypothesis.len() as f64;
    let r = reference.len() as f64;
    let brevity = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    brevity * precision
}

/// Mean sentence-level BLEU-n over (hypothesis, reference) pairs.
pub fn corpus_bleu_n(pairs: &[(Vec<String>, Vec<String>)], n: usize) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|(h, r)| bleu_n(h, r, n)).sum::<f64>() / pairs.len() as f64
}

/// Distinct n-grams over total n-grams, pooled across all responses.
pub fn dist_n(responses: &[Vec<String>], n: usize) -> f64 {
    let mut distinct = HashSet::new();
    let mut total = 0usize;
    for resp in responses {
        if resp.len() >= n {
            for gram in resp.windows(n) {
                distinct.insert(gram);
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        distinct.len() as f64 / total as f64
    }
}

// ---- selection diagnostics ------------------------------------------------------

/// Posterior argmax module for one labeled pair (no sampling).
pub fn posterior_module<S: Scalar>(
    params: &ModelParams<S>,
    pair: &PostResponsePair,
) -> Result<usize> {
    let mut g = Graph::<S>::new();
    let refs = params.leaf_into(&mut g, false)?;
    let enc = encode_post(
        &mut g,
        &refs.post_fwd,
        &refs.post_bwd,
        refs.embedding,
        params.dims.hidden,
        &pair.post,
    )?;
    let y = encode_response(
        &mut g,
        &refs.resp_fwd,
        &refs.resp_bwd,
        refs.embedding,
        params.dims.hidden,
        &pair.response,
    )?;
    let candidates = map_all(&mut g, &refs.mappings, enc.summary)?;
    let y_proj = project_response(&mut g, refs.resp_proj, y)?;
    let pi = posterior_distribution(&mut g, &candidates, y_proj)?;
    Ok(argmax(g.values(pi)))
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionStats {
    /// Argmax counts per mapping module.
    pub usage: Vec<usize>,
    /// `confusion[mode][module]` over the labeled pairs.
    pub confusion: Vec<Vec<usize>>,
    /// Sum over modes of the best module count, divided by total pairs.
    pub purity: f64,
    pub total: usize,
}

/// Posterior-argmax statistics over labeled pairs.
pub fn selection_stats<S: Scalar>(
    params: &ModelParams<S>,
    pairs: &[PostResponsePair],
) -> Result<SelectionStats> {
    if pairs.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut labeled = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        match p.mode {
            Some(m) => labeled.push((m, p)),
            None => return Err(Error::MissingModeLabel(i)),
        }
    }
    let modes = labeled.iter().map(|(m, _)| *m).max().unwrap() + 1;
    let k = params.dims.mappings;
    let mut usage = vec![0usize; k];
    let mut confusion = vec![vec![0usize; k]; modes];
    for (mode, pair) in labeled {
        let module = posterior_module(params, pair)?;
        usage[module] += 1;
        confusion[mode][module] += 1;
    }
    let hits: usize = confusion.iter().map(|row| row.iter().max().copied().unwrap_or(0)).sum();
    Ok(SelectionStats {
        usage,
        confusion,
        purity: hits as f64 / pairs.len() as f64,
        total: pairs.len(),
    })
}

/// Argmax usage histogram alone (works on unlabeled pairs).
pub fn selection_usage<S: Scalar>(
    params: &ModelParams<S>,
    pairs: &[PostResponsePair],
) -> Result<Vec<usize>> {
    let mut usage = vec![0usize; params.dims.mappings];
    for pair in pairs {
        usage[posterior_module(params, pair)?] += 1;
    }
    Ok(usage)
}

// ---- keywords ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct Keyword {
    pub word: String,
    pub count: usize,
    /// `p(w | M_k) = N_k^w / sum_i N_i^w`.
    pub p: f64,
}

/// Rank each module's characteristic words: occurrences above `min_count`,
/// ordered by how exclusively the word belongs to that module.
pub fn mapping_keywords(
    responses_by_module: &[Vec<Vec<String>>],
    min_count: usize,
) -> Vec<Vec<Keyword>> {
    let mut per_module: Vec<HashMap<&String, usize>> = Vec::with_capacity(responses_by_module.len());
    let mut totals: HashMap<&String, usize> = HashMap::new();
    for responses in responses_by_module {
        let mut counts = HashMap::new();
        for resp in responses {
            for word in resp {
                *counts.entry(word).or_insert(0) += 1;
                *totals.entry(word).or_insert(0) += 1;
            }
        }
        per_module.push(counts);
    }
    per_module
        .into_iter()
        .map(|counts| {
            let mut kws: Vec<Keyword> = counts
                .into_iter()
                .filter(|(_, c)| *c > min_count)
                .map(|(word, c)| Keyword {
                    word: word.clone(),
                    count: c,
                    p: c as f64 / totals[word] as f64,
                })
                .collect();
            kws.sort_by(|a, b| b.p.total_cmp(&a.p).then(a.word.cmp(&b.word)));
            kws
        })
        .collect()
}

// ---- representation export -----------------------------------------------------------

/// Write one `post_index<TAB>module_index<TAB>v1<TAB>v2...` record per
/// (post, module), with full-precision value formatting.
pub fn export_representations<S: Scalar>(
    params: &ModelParams<S>,
    posts: &[Vec<usize>],
    w: &mut impl Write,
) -> Result<usize> {
    let mut records = 0usize;
    for (pi, post) in posts.iter().enumerate() {
        let mut g = Graph::<S>::new();
        let refs = params.leaf_into(&mut g, false)?;
        let enc = encode_post(
            &mut g,
            &refs.post_fwd,
            &refs.post_bwd,
            refs.embedding,
            params.dims.hidden,
            post,
        )?;
        let candidates = map_all(&mut g, &refs.mappings, enc.summary)?;
        for (k, &m) in candidates.iter().enumerate() {
            write!(w, "{pi}\t{k}")?;
            for v in g.values(m) {
                write!(w, "\t{v}")?;
            }
            writeln!(w)?;
            records += 1;
        }
    }
    Ok(records)
}

/// Parse records written by [`export_representations`].
pub fn parse_representations(r: impl std::io::BufRead) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let parse_err = |what: &str| Error::BadCorpusLine {
            line: idx + 1,
            details: format!("representation file: bad {what}"),
        };
        let post: usize = fields.next().ok_or_else(|| parse_err("post index"))?
            .parse().map_err(|_| parse_err("post index"))?;
        let module: usize = fields.next().ok_or_else(|| parse_err("module index"))?
            .parse().map_err(|_| parse_err("module index"))?;
        let values: Vec<f64> = fields
            .map(|f| f.parse().map_err(|_| parse_err("value")))
            .collect::<Result<_>>()?;
        out.push((post, module, values));
    }
    Ok(out)
}

/// Mean pairwise distance within modules vs across modules.
pub fn cluster_spread(records: &[(usize, usize, Vec<f64>)]) -> (f64, f64) {
    let mut intra = (0.0, 0usize);
    let mut inter = (0.0, 0usize);
    for i in 0..records.len() {
        for j in (i + 1)..records.len() {
            let d: f64 = records[i]
                .2
                .iter()
                .zip(&records[j].2)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if records[i].1 == records[j].1 {
                intra.0 += d;
                intra.1 += 1;
            } else {
                inter.0 += d;
                inter.1 += 1;
            }
        }
    }
    (intra.0 / intra.1.max(1) as f64, inter.0 / inter.1.max(1) as f64)
}

// ---- mode coverage ---------------------------------------------------------------------

/// Which of the first `r` mode functions a response reproduces for `post`.
pub fn matching_modes(post: &[String], response: &[String], r: usize) -> BTreeSet<usize> {
    let post_refs: Vec<&str> = post.iter().map(String::as_str).collect();
    (0..r)
        .filter(|&mode| mode_response(mode, &post_refs) == response)
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    /// Distinct modes reproduced by the K generated responses, per post.
    pub per_post_modes: Vec<BTreeSet<usize>>,
    pub modes: usize,
}

impl CoverageReport {
    /// Fraction of posts whose responses cover at least `m` modes.
    pub fn fraction_covering_at_least(&self, m: usize) -> f64 {
        if self.per_post_modes.is_empty() {
            return 0.0;
        }
        let hits = self.per_post_modes.iter().filter(|s| s.len() >= m).count();
        hits as f64 / self.per_post_modes.len() as f64
    }

    /// Fraction of posts whose responses match exactly one mode.
    pub fn fraction_covering_exactly(&self, m: usize) -> f64 {
        if self.per_post_modes.is_empty() {
            return 0.0;
        }
        let hits = self.per_post_modes.iter().filter(|s| s.len() == m).count();
        hits as f64 / self.per_post_modes.len() as f64
    }
}

/// Run `generate_all` on each post and classify every response against the
/// mode functions.
pub fn mode_coverage<S: Scalar>(
    params: &ModelParams<S>,
    vocab: &Vocab,
    posts: &[Vec<usize>],
    modes: usize,
    max_len: usize,
) -> Result<CoverageReport> {
    let mut per_post = Vec::with_capacity(posts.len());
    for post in posts {
        let post_tokens = vocab.decode_tokens(post);
        let mut covered = BTreeSet::new();
        for resp in generate_all(params, post, max_len)? {
            let resp_tokens = vocab.decode_tokens(&resp);
            covered.extend(matching_modes(&post_tokens, &resp_tokens, modes));
        }
        per_post.push(covered);
    }
    Ok(CoverageReport { per_post_modes: per_post, modes })
}

// ---- assembled report ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CoverageSummary {
    pub modes: usize,
    pub mean_modes_covered: f64,
    pub fraction_at_least_3: f64,
    pub fraction_exactly_1: f64,
}

/// The metric block emitted by `eval`: corpus BLEU/Dist plus, where the
/// corpus carries mode labels, specialization diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub pairs: usize,
    pub responses: usize,
    pub multi: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_module_usage: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub purity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageSummary>,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Generate one response per mapping module instead of a single
    /// randomly-seeded response per pair.
    pub multi: bool,
    pub max_len: usize,
    pub seed: u64,
    /// Worker threads for generation sharding (1 = bitwise-reproducible
    /// single-thread mode; results are identical either way).
    pub threads: usize,
}

fn generate_hypotheses<S: Scalar>(
    params: &ModelParams<S>,
    pairs: &[PostResponsePair],
    opts: &EvalOptions,
) -> Result<Vec<Vec<Vec<usize>>>> {
    // module picks are pre-drawn serially so sharding cannot change them
    let picks: Vec<Option<usize>> = if opts.multi {
        vec![None; pairs.len()]
    } else {
        let mut pick_rng = rng::stream(opts.seed, "eval-pick");
        (0..pairs.len())
            .map(|_| Some(pick_rng.gen_range(0..params.dims.mappings)))
            .collect()
    };

    let work = |range: std::ops::Range<usize>| -> Result<Vec<Vec<Vec<usize>>>> {
        let mut out = Vec::with_capacity(range.len());
        for i in range {
            let pair = &pairs[i];
            let responses = match picks[i] {
                None => generate_all(params, &pair.post, opts.max_len)?,
                Some(k) => {
                    let mut unused = rng::stream(opts.seed, "eval-greedy");
                    vec![generate(
                        params,
                        &pair.post,
                        MappingChoice::Index(k),
                        opts.max_len,
                        DecodeMode::Greedy,
                        &mut unused,
                    )?]
                }
            };
            out.push(responses);
        }
        Ok(out)
    };

    let threads = opts.threads.max(1).min(pairs.len().max(1));
    if threads <= 1 {
        return work(0..pairs.len());
    }
    // greedy decoding is pure, so sharding only changes wall time
    let chunk = pairs.len().div_ceil(threads);
    let mut shards = Vec::with_capacity(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let lo = t * chunk;
                let hi = ((t + 1) * chunk).min(pairs.len());
                let work = &work;
                s.spawn(move || work(lo..hi))
            })
            .collect();
        for h in handles {
            shards.push(h.join().expect("eval shard panicked"));
        }
    });
    let mut out = Vec::with_capacity(pairs.len());
    for shard in shards {
        out.extend(shard?);
    }
    Ok(out)
}

/// Generate responses for every pair and score them.
pub fn evaluate_model<S: Scalar>(
    params: &ModelParams<S>,
    vocab: &Vocab,
    pairs: &[PostResponsePair],
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::EmptySplit);
    }
    let hypotheses = generate_hypotheses(params, pairs, opts)?;

    let mut bleu_pairs = Vec::new();
    let mut all_responses = Vec::new();
    for (pair, responses) in pairs.iter().zip(&hypotheses) {
        let reference = vocab.decode_tokens(&pair.response);
        for resp in responses {
            let tokens = vocab.decode_tokens(resp);
            bleu_pairs.push((tokens.clone(), reference.clone()));
            all_responses.push(tokens);
        }
    }

    let labeled = pairs.iter().all(|p| p.mode.is_some());
    let (usage, purity) = if labeled {
        let stats = selection_stats(params, pairs)?;
        (Some(stats.usage), Some(stats.purity))
    } else {
        (Some(selection_usage(params, pairs)?), None)
    };

    let coverage = if labeled {
        let modes = pairs.iter().filter_map(|p| p.mode).max().unwrap() + 1;
        if modes <= crate::data::NUM_MODES {
            // coverage is defined per distinct post
            let mut seen = HashSet::new();
            let posts: Vec<Vec<usize>> = pairs
                .iter()
                .filter(|p| seen.insert(p.post.clone()))
                .map(|p| p.post.clone())
                .collect();
            let report = mode_coverage(params, vocab, &posts, modes, opts.max_len)?;
            let mean = report.per_post_modes.iter().map(BTreeSet::len).sum::<usize>() as f64
                / report.per_post_modes.len().max(1) as f64;
            Some(CoverageSummary {
                modes,
                mean_modes_covered: mean,
                fraction_at_least_3: report.fraction_covering_at_least(3),
                fraction_exactly_1: report.fraction_covering_exactly(1),
            })
        } else {
            None
        }
    } else {
        None
    };

    Ok(MetricReport {
        bleu1: corpus_bleu_n(&bleu_pairs, 1),
        bleu2: corpus_bleu_n(&bleu_pairs, 2),
        dist1: dist_n(&all_responses, 1),
        dist2: dist_n(&all_responses, 2),
        pairs: pairs.len(),
        responses: all_responses.len(),
        multi: opts.multi,
        per_module_usage: usage,
        purity,
        coverage,
    })
}

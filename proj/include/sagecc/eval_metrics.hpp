#pragma once

// Caption metrics: corpus BLEU-N, ROUGE-L, approximate METEOR (exact and stem
// stages, no synonyms) and CIDEr-D. Scores use the 0-100 table scale.

#include <array>
#include <string>
#include <vector>

namespace sagecc {

using Tokens = std::vector<std::string>;

/// Lowercase; split on whitespace and punctuation, punctuation dropped.
Tokens tokenize(const std::string& text);

struct EvalCorpus {
  std::vector<Tokens> hypotheses;
  std::vector<std::vector<Tokens>> references;

  /// Throws InputError on an empty corpus, misaligned sizes or missing references.
  void validate() const;
  size_t size() const { return hypotheses.size(); }
};

EvalCorpus make_corpus(const std::vector<std::string>& hypotheses,
                       const std::vector<std::vector<std::string>>& references);

/// Corpus BLEU-n with closest-reference brevity penalty.
double bleu(const EvalCorpus& corpus, int n);
/// BLEU-1..4 from one pass over the corpus.
std::array<double, 4> bleu_all(const EvalCorpus& corpus);

size_t lcs_length(const Tokens& a, const Tokens& b);
double rouge_l_sentence(const Tokens& hyp, const std::vector<Tokens>& refs, double beta = 1.2);
/// Mean of per-sample LCS F-measures (best reference).
double rouge_l(const EvalCorpus& corpus, double beta = 1.2);

/// Porter (1980) suffix-stripping stemmer.
std::string porter_stem(const std::string& word);

struct MeteorParams {
  double alpha = 0.9;
  double beta = 3.0;
  double gamma = 0.5;
};

struct MeteorAlignment {
  int matches = 0;
  int chunks = 0;
  int exact = 0;
  int stem = 0;
};

MeteorAlignment meteor_align(const Tokens& hyp, const Tokens& ref);
double meteor_sentence(const Tokens& hyp, const std::vector<Tokens>& refs,
                       const MeteorParams& params = {});
double meteor_approx(const EvalCorpus& corpus, const MeteorParams& params = {});

/// Gaussian length penalty exp(-(len_h - len_r)^2 / (2 sigma^2)).
double cider_length_penalty(size_t hyp_len, size_t ref_len, double sigma = 6.0);
/// CIDEr-D: idf = log(N) - log(df), clipped TF-IDF cosine per order with the
/// length penalty, averaged over orders and references, x10; reported x100.
double cider_d(const EvalCorpus& corpus, double sigma = 6.0);

struct MetricReport {
  double bleu1 = 0, bleu2 = 0, bleu3 = 0, bleu4 = 0;
  double meteor_approx = 0;
  double rouge_l = 0;
  double cider_d = 0;

  std::string to_json() const;
  std::string to_table() const;
  bool operator==(const MetricReport&) const = default;
};

MetricReport score_corpus(const EvalCorpus& corpus);

}  // namespace sagecc

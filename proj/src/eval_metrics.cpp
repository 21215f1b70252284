#include "sagecc/eval_metrics.hpp"

#include "sagecc/core/errors.hpp"

#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <set>

namespace sagecc {

namespace {

using NgramCounts = std::map<Tokens, int>;

NgramCounts ngrams(const Tokens& t, size_t n) {
  NgramCounts out;
  if (t.size() < n) return out;
  for (size_t i = 0; i + n <= t.size(); ++i) ++out[Tokens(t.begin() + static_cast<long>(i), t.begin() + static_cast<long>(i + n))];
  return out;
}

}  // namespace

Tokens tokenize(const std::string& text) {
  Tokens out;
  std::string cur;
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isalnum(u)) {
      cur += static_cast<char>(std::tolower(u));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

void EvalCorpus::validate() const {
  if (hypotheses.empty()) throw InputError("metrics: empty hypothesis set");
  if (hypotheses.size() != references.size()) {
    throw InputError("metrics: " + std::to_string(hypotheses.size()) + " hypotheses but " +
                     std::to_string(references.size()) + " reference sets");
  }
  for (size_t i = 0; i < references.size(); ++i) {
    if (references[i].empty()) throw InputError("metrics: sample " + std::to_string(i) + " has no references");
  }
}

EvalCorpus make_corpus(const std::vector<std::string>& hypotheses,
                       const std::vector<std::vector<std::string>>& references) {
  EvalCorpus c;
  for (const auto& h : hypotheses) c.hypotheses.push_back(tokenize(h));
  for (const auto& refs : references) {
    std::vector<Tokens> r;
    for (const auto& s : refs) r.push_back(tokenize(s));
    c.references.push_back(std::move(r));
  }
  return c;
}

std::array<double, 4> bleu_all(const EvalCorpus& corpus) {
  corpus.validate();
  std::array<double, 4> matched{}, total{};
  double hyp_len = 0.0, ref_len = 0.0;
  for (size_t s = 0; s < corpus.size(); ++s) {
    const Tokens& hyp = corpus.hypotheses[s];
    const auto& refs = corpus.references[s];
    hyp_len += static_cast<double>(hyp.size());
    // Closest reference length, shorter on ties.
    size_t best = refs.front().size();
    for (const auto& r : refs) {
      const auto d = std::abs(static_cast<long>(r.size()) - static_cast<long>(hyp.size()));
      const auto bd = std::abs(static_cast<long>(best) - static_cast<long>(hyp.size()));
      if (d < bd || (d == bd && r.size() < best)) best = r.size();
    }
    ref_len += static_cast<double>(best);
    for (size_t n = 1; n <= 4; ++n) {
      const NgramCounts h = ngrams(hyp, n);
      NgramCounts max_ref;
      for (const auto& r : refs) {
        for (const auto& [g, c] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], c);
      }
      for (const auto& [g, c] : h) {
        auto it = max_ref.find(g);
        matched[n - 1] += std::min(c, it == max_ref.end() ? 0 : it->second);
        total[n - 1] += c;
      }
    }
  }
  const double bp = hyp_len == 0.0 ? 0.0 : (hyp_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len));
  std::array<double, 4> out{};
  double log_sum = 0.0;
  bool zero = false;
  for (size_t n = 0; n < 4; ++n) {
    if (total[n] == 0.0 || matched[n] == 0.0) zero = true;
    if (!zero) log_sum += std::log(matched[n] / total[n]);
    out[n] = zero ? 0.0 : 100.0 * bp * std::exp(log_sum / static_cast<double>(n + 1));
  }
  return out;
}

double bleu(const EvalCorpus& corpus, int n) {
  if (n < 1 || n > 4) throw InputError("bleu: n must be in [1,4]");
  return bleu_all(corpus)[static_cast<size_t>(n - 1)];
}

size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l_sentence(const Tokens& hyp, const std::vector<Tokens>& refs, double beta) {
  double best = 0.0;
  for (const auto& r : refs) {
    const auto lcs = static_cast<double>(lcs_length(hyp, r));
    if (lcs == 0.0) continue;
    const double p = lcs / static_cast<double>(hyp.size());
    const double rec = lcs / static_cast<double>(r.size());
    const double b2 = beta * beta;
    best = std::max(best, (1.0 + b2) * p * rec / (rec + b2 * p));
  }
  return best;
}

double rouge_l(const EvalCorpus& corpus, double beta) {
  corpus.validate();
  double sum = 0.0;
  for (size_t s = 0; s < corpus.size(); ++s) {
    sum += rouge_l_sentence(corpus.hypotheses[s], corpus.references[s], beta);
  }
  return 100.0 * sum / static_cast<double>(corpus.size());
}

MeteorAlignment meteor_align(const Tokens& hyp, const Tokens& ref) {
  // ref position aligned to each hyp position, -1 when unaligned.
  std::vector<int> align(hyp.size(), -1);
  std::vector<bool> used(ref.size(), false);
  MeteorAlignment a;
  auto stage = [&](auto key, int& counter) {
    for (size_t i = 0; i < hyp.size(); ++i) {
      if (align[i] >= 0) continue;
      const std::string h = key(hyp[i]);
      for (size_t j = 0; j < ref.size(); ++j) {
        if (used[j] || key(ref[j]) != h) continue;
        align[i] = static_cast<int>(j);
        used[j] = true;
        ++counter;
        break;
      }
    }
  };
  stage([](const std::string& w) { return w; }, a.exact);
  stage([](const std::string& w) { return porter_stem(w); }, a.stem);
  a.matches = a.exact + a.stem;
  int prev = -2;
  bool in_chunk = false;
  for (int j : align) {
    if (j < 0) {
      in_chunk = false;
      continue;
    }
    if (!in_chunk || j != prev + 1) ++a.chunks;
    in_chunk = true;
    prev = j;
  }
  return a;
}

double meteor_sentence(const Tokens& hyp, const std::vector<Tokens>& refs,
                       const MeteorParams& params) {
  double best = 0.0;
  for (const auto& r : refs) {
    const MeteorAlignment a = meteor_align(hyp, r);
    if (a.matches == 0) continue;
    const double p = static_cast<double>(a.matches) / static_cast<double>(hyp.size());
    const double rec = static_cast<double>(a.matches) / static_cast<double>(r.size());
    const double fmean = p * rec / (params.alpha * p + (1.0 - params.alpha) * rec);
    const double frag = static_cast<double>(a.chunks) / static_cast<double>(a.matches);
    const double penalty = params.gamma * std::pow(frag, params.beta);
    best = std::max(best, fmean * (1.0 - penalty));
  }
  return best;
}

double meteor_approx(const EvalCorpus& corpus, const MeteorParams& params) {
  corpus.validate();
  double sum = 0.0;
  for (size_t s = 0; s < corpus.size(); ++s) {
    sum += meteor_sentence(corpus.hypotheses[s], corpus.references[s], params);
  }
  return 100.0 * sum / static_cast<double>(corpus.size());
}

double cider_length_penalty(size_t hyp_len, size_t ref_len, double sigma) {
  const double delta = static_cast<double>(hyp_len) - static_cast<double>(ref_len);
  return std::exp(-(delta * delta) / (2.0 * sigma * sigma));
}

double cider_d(const EvalCorpus& corpus, double sigma) {
  corpus.validate();
  const size_t n_samples = corpus.size();
  if (n_samples < 2) {
    std::cerr << "warning: cider_d on a single-sample corpus; idf is degenerate (log 1 = 0)\n";
  }
  std::map<Tokens, double> df;
  for (const auto& refs : corpus.references) {
    std::set<Tokens> seen;
    for (const auto& r : refs) {
      for (size_t n = 1; n <= 4; ++n) {
        for (const auto& [g, _] : ngrams(r, n)) seen.insert(g);
      }
    }
    for (const auto& g : seen) df[g] += 1.0;
  }
  const double log_n = std::log(static_cast<double>(n_samples));

  struct Vec {
    std::array<std::map<Tokens, double>, 4> w;
    std::array<double, 4> norm{};
    size_t length = 0;
  };
  auto vectorize = [&](const Tokens& t) {
    Vec v;
    v.length = t.size();
    for (size_t n = 1; n <= 4; ++n) {
      for (const auto& [g, tf] : ngrams(t, n)) {
        auto it = df.find(g);
        const double idf = log_n - std::log(std::max(1.0, it == df.end() ? 0.0 : it->second));
        const double x = static_cast<double>(tf) * idf;
        v.w[n - 1][g] = x;
        v.norm[n - 1] += x * x;
      }
      v.norm[n - 1] = std::sqrt(v.norm[n - 1]);
    }
    return v;
  };

  double total = 0.0;
  for (size_t s = 0; s < n_samples; ++s) {
    const Vec h = vectorize(corpus.hypotheses[s]);
    std::array<double, 4> acc{};
    for (const auto& ref : corpus.references[s]) {
      const Vec r = vectorize(ref);
      const double pen = cider_length_penalty(h.length, r.length, sigma);
      for (size_t n = 0; n < 4; ++n) {
        double val = 0.0;
        for (const auto& [g, x] : h.w[n]) {
          auto it = r.w[n].find(g);
          if (it != r.w[n].end()) val += std::min(x, it->second) * it->second;
        }
        if (h.norm[n] != 0.0 && r.norm[n] != 0.0) val /= h.norm[n] * r.norm[n];
        acc[n] += val * pen;
      }
    }
    double mean = (acc[0] + acc[1] + acc[2] + acc[3]) / 4.0;
    mean /= static_cast<double>(corpus.references[s].size());
    total += 10.0 * mean;
  }
  return 100.0 * total / static_cast<double>(n_samples);
}

MetricReport score_corpus(const EvalCorpus& corpus) {
  MetricReport r;
  const auto b = bleu_all(corpus);
  r.bleu1 = b[0];
  r.bleu2 = b[1];
  r.bleu3 = b[2];
  r.bleu4 = b[3];
  r.meteor_approx = meteor_approx(corpus);
  r.rouge_l = rouge_l(corpus);
  r.cider_d = cider_d(corpus);
  return r;
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j = {{"bleu1", bleu1},     {"bleu2", bleu2},
                              {"bleu3", bleu3},     {"bleu4", bleu4},
                              {"meteor_approx", meteor_approx},
                              {"rouge_l", rouge_l}, {"cider_d", cider_d}};
  return j.dump(2);
}

std::string MetricReport::to_table() const {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "| BLEU-1 | BLEU-2 | BLEU-3 | BLEU-4 | METEOR~ | ROUGE-L | CIDEr-D |\n"
                "|--------|--------|--------|--------|---------|---------|---------|\n"
                "| %6.2f | %6.2f | %6.2f | %6.2f | %7.2f | %7.2f | %7.2f |\n",
                bleu1, bleu2, bleu3, bleu4, meteor_approx, rouge_l, cider_d);
  return buf;
}

}  // namespace sagecc

#include "doctest.h"

#include "sagecc/core/errors.hpp"
#include "sagecc/eval_metrics.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <random>

using namespace sagecc;

namespace {

const std::vector<std::string> kHyps = {
    "a building appears on the bareland",
    "the road is removed",
    "several roads are built",
};
const std::vector<std::vector<std::string>> kRefs = {
    {"a building appears on the bareland", "several buildings appear on the bareland"},
    {"the road is removed", "roads are removed"},
    {"a road is built along the bareland", "the scene is the same as before"},
};

std::vector<double> all_scores(const EvalCorpus& c) {
  const MetricReport r = score_corpus(c);
  return {r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.meteor_approx, r.rouge_l, r.cider_d};
}

}  // namespace

TEST_CASE("tokenize lowercases and drops punctuation") {
  CHECK(tokenize("A road, near the Houses.") == Tokens{"a", "road", "near", "the", "houses"});
  CHECK(tokenize("  ").empty());
}

TEST_CASE("corpus validation") {
  CHECK_THROWS_AS(bleu(make_corpus({}, {}), 4), InputError);
  CHECK_THROWS_AS(rouge_l(make_corpus({"a"}, {})), InputError);
  CHECK_THROWS_AS(cider_d(make_corpus({"a", "b"}, {{"a"}, {}})), InputError);
}

TEST_CASE("bleu hand cases") {
  const EvalCorpus c = make_corpus({"a b c"}, {{"a b c d"}});
  CHECK(bleu(c, 1) == doctest::Approx(100.0 * std::exp(1.0 - 4.0 / 3.0)).epsilon(1e-12));
  CHECK(bleu(c, 1) == doctest::Approx(71.653).epsilon(1e-5));

  const EvalCorpus same = make_corpus(kHyps, {{kHyps[0]}, {kHyps[1]}, {kHyps[2]}});
  CHECK(bleu(same, 4) == doctest::Approx(100.0));

  const EvalCorpus no4 = make_corpus({"a b c d e"}, {{"a b c x d e"}});
  CHECK(bleu(no4, 4) == 0.0);
  CHECK(bleu(no4, 2) > 0.0);
  CHECK_THROWS(bleu(c, 0));
  CHECK_THROWS(bleu(c, 5));

  const auto all = bleu_all(make_corpus(kHyps, kRefs));
  for (int n = 1; n <= 4; ++n) CHECK(all[n - 1] == doctest::Approx(bleu(make_corpus(kHyps, kRefs), n)));
}

TEST_CASE("rouge-l hand cases") {
  CHECK(lcs_length(tokenize("a c"), tokenize("a b c")) == 2);
  const double p = 1.0, r = 2.0 / 3.0, b2 = 1.2 * 1.2;
  const double f = (1 + b2) * p * r / (r + b2 * p);
  CHECK(rouge_l(make_corpus({"a c"}, {{"a b c"}})) == doctest::Approx(100.0 * f).epsilon(1e-12));
  CHECK(100.0 * f == doctest::Approx(77.215).epsilon(1e-4));
  CHECK(rouge_l(make_corpus({"a b c"}, {{"a b c"}})) == doctest::Approx(100.0));
  CHECK(rouge_l(make_corpus({"x y"}, {{"a b c"}})) == 0.0);
  // Best reference wins.
  CHECK(rouge_l(make_corpus({"a b"}, {{"z", "a b"}})) == doctest::Approx(100.0));
}

TEST_CASE("porter stemmer matches the reference table") {
  const std::pair<const char*, const char*> table[] = {
      {"buildings", "build"}, {"caresses", "caress"}, {"ponies", "poni"}, {"ties", "ti"},
      {"caress", "caress"}, {"cats", "cat"}, {"feed", "feed"}, {"agreed", "agre"},
      {"plastered", "plaster"}, {"bled", "bled"}, {"motoring", "motor"}, {"sing", "sing"},
      {"conflated", "conflat"}, {"troubled", "troubl"}, {"sized", "size"}, {"hopping", "hop"},
      {"tanned", "tan"}, {"falling", "fall"}, {"hissing", "hiss"}, {"fizzed", "fizz"},
      {"failing", "fail"}, {"filing", "file"}, {"happy", "happi"}, {"sky", "sky"},
      {"relational", "relat"}, {"conditional", "condit"}, {"rational", "ration"},
      {"valenci", "valenc"}, {"hesitanci", "hesit"}, {"digitizer", "digit"},
      {"conformabli", "conform"}, {"radicalli", "radic"}, {"differentli", "differ"},
      {"vileli", "vile"}, {"analogousli", "analog"}, {"vietnamization", "vietnam"},
      {"predication", "predic"}, {"operator", "oper"}, {"feudalism", "feudal"},
      {"decisiveness", "decis"}, {"hopefulness", "hope"}, {"callousness", "callous"},
      {"formaliti", "formal"}, {"sensitiviti", "sensit"}, {"sensibiliti", "sensibl"},
      {"triplicate", "triplic"}, {"formative", "form"}, {"formalize", "formal"},
      {"electriciti", "electr"}, {"electrical", "electr"}, {"hopeful", "hope"},
      {"goodness", "good"}, {"revival", "reviv"}, {"allowance", "allow"}, {"inference", "infer"},
      {"airliner", "airlin"}, {"gyroscopic", "gyroscop"}, {"adjustable", "adjust"},
      {"defensible", "defens"}, {"irritant", "irrit"}, {"replacement", "replac"},
      {"adjustment", "adjust"}, {"dependent", "depend"}, {"adoption", "adopt"},
      {"homologou", "homolog"}, {"communism", "commun"}, {"activate", "activ"},
      {"angulariti", "angular"}, {"homologous", "homolog"}, {"effective", "effect"},
      {"bowdlerize", "bowdler"}, {"probate", "probat"}, {"rate", "rate"}, {"cease", "ceas"},
      {"controll", "control"}, {"roll", "roll"}, {"roads", "road"}, {"appears", "appear"},
      {"replaced", "replac"}, {"vegetation", "veget"}, {"bareland", "bareland"},
      {"constructed", "construct"}, {"generalizations", "gener"}, {"oscillators", "oscil"},
  };
  for (const auto& [word, stem] : table) {
    CHECK_MESSAGE(porter_stem(word) == stem, word);
  }
  CHECK(porter_stem("a") == "a");
  CHECK(porter_stem("") == "");
}

TEST_CASE("meteor hand cases") {
  // One chunk over four matches: penalty 0.5 * (1/4)^3.
  const EvalCorpus same = make_corpus({"a b c d"}, {{"a b c d"}});
  CHECK(meteor_approx(same) == doctest::Approx(100.0 * (1.0 - 0.5 / 64.0)).epsilon(1e-12));
  CHECK(meteor_approx(same) == doctest::Approx(99.21875));
  CHECK(meteor_approx(make_corpus({"x y"}, {{"a b"}})) == 0.0);

  const MeteorAlignment al = meteor_align(tokenize("buildings appear"), tokenize("building appears"));
  CHECK(al.matches == 2);
  CHECK(al.exact == 0);
  CHECK(al.stem == 2);
  CHECK(al.chunks == 1);

  // Two chunks: "a b" and "d", with P = R = 3/4.
  const MeteorAlignment split = meteor_align(tokenize("a b x d"), tokenize("a b y d"));
  CHECK(split.matches == 3);
  CHECK(split.chunks == 2);
  const double pen = 0.5 * std::pow(2.0 / 3.0, 3.0);
  CHECK(meteor_sentence(tokenize("a b x d"), {tokenize("a b y d")}) ==
        doctest::Approx(0.75 * (1.0 - pen)).epsilon(1e-12));
}

TEST_CASE("cider-d hand cases") {
  // Perfect sample scores 10 per order pair, the disjoint one 0; mean 5, reported x100.
  CHECK(cider_d(make_corpus({"a b c d", "e f"}, {{"a b c d"}, {"g h"}})) ==
        doctest::Approx(500.0).epsilon(1e-12));
  CHECK(cider_d(make_corpus(kHyps, kRefs)) == doctest::Approx(400.6207857221917).epsilon(1e-12));
  CHECK(cider_d(make_corpus({"a b", "c d"}, {{"x y"}, {"z w"}})) == 0.0);

  CHECK(cider_length_penalty(4, 2) == doctest::Approx(std::exp(-4.0 / 72.0)).epsilon(1e-15));
  CHECK(cider_length_penalty(3, 3) == 1.0);
  // Doubling a hypothesis only changes the length term and the clipped counts.
  const double doubled = cider_d(make_corpus({"a b a b", "c d"}, {{"a b"}, {"e f"}}));
  CHECK(doubled > 0.0);
  CHECK(doubled < cider_d(make_corpus({"a b", "c d"}, {{"a b"}, {"e f"}})));
}

TEST_CASE("metrics are invariant to sample order") {
  const EvalCorpus c = make_corpus(kHyps, kRefs);
  std::vector<size_t> perm = {2, 0, 1};
  std::vector<std::string> h;
  std::vector<std::vector<std::string>> r;
  for (size_t i : perm) {
    h.push_back(kHyps[i]);
    r.push_back(kRefs[i]);
  }
  const auto a = all_scores(c), b = all_scores(make_corpus(h, r));
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("random corpora: bounds and monotone replacement") {
  const std::vector<std::string> words = {"a", "road", "building", "is", "built", "the", "trees", "removed"};
  std::mt19937_64 rng(3);
  auto sentence = [&] {
    std::string s;
    const size_t len = 2 + rng() % 6;
    for (size_t i = 0; i < len; ++i) s += (i ? " " : "") + words[rng() % words.size()];
    return s;
  };
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::string> h;
    std::vector<std::vector<std::string>> r;
    for (int i = 0; i < 5; ++i) {
      h.push_back(sentence());
      r.push_back({sentence(), sentence()});
    }
    const auto base = all_scores(make_corpus(h, r));
    for (size_t k = 0; k < base.size(); ++k) {
      CHECK(base[k] >= 0.0);
      if (k < 6) CHECK(base[k] <= 100.0 + 1e-9);
    }
    const size_t j = rng() % h.size();
    h[j] = r[j][0];
    const auto better = all_scores(make_corpus(h, r));
    // BLEU is corpus-level and CIDEr-D uses document frequencies, so only the
    // per-sample averages are strictly monotone.
    CHECK(better[4] >= base[4] - 1e-9);
    CHECK(better[5] >= base[5] - 1e-9);
  }
}

TEST_CASE("report json keys") {
  const auto j = nlohmann::json::parse(score_corpus(make_corpus(kHyps, kRefs)).to_json());
  for (const char* key : {"bleu1", "bleu2", "bleu3", "bleu4", "meteor_approx", "rouge_l", "cider_d"}) {
    CHECK_MESSAGE(j.contains(key), key);
  }
  CHECK(j.size() == 7);
}

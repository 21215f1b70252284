#include "sagecc/eval_metrics.hpp"

#include <string_view>

namespace sagecc {

namespace {

class Stemmer {
 public:
  explicit Stemmer(std::string word) : b_(std::move(word)), k_(static_cast<int>(b_.size()) - 1) {}

  std::string run() {
    if (k_ <= 1) return b_;
    step1ab();
    if (k_ > 0) {
      step1c();
      step2();
      step3();
      step4();
      step5();
    }
    return b_.substr(0, static_cast<size_t>(k_ + 1));
  }

 private:
  char at(int i) const { return b_[static_cast<size_t>(i)]; }

  bool cons(int i) const {
    switch (at(i)) {
      case 'a': case 'e': case 'i': case 'o': case 'u':
        return false;
      case 'y':
        return i == 0 ? true : !cons(i - 1);
      default:
        return true;
    }
  }

  // Number of VC sequences in b[0..j].
  int m() const {
    int n = 0, i = 0;
    while (true) {
      if (i > j_) return n;
      if (!cons(i)) break;
      ++i;
    }
    ++i;
    while (true) {
      while (true) {
        if (i > j_) return n;
        if (cons(i)) break;
        ++i;
      }
      ++i;
      ++n;
      while (true) {
        if (i > j_) return n;
        if (!cons(i)) break;
        ++i;
      }
      ++i;
    }
  }

  bool vowel_in_stem() const {
    for (int i = 0; i <= j_; ++i) {
      if (!cons(i)) return true;
    }
    return false;
  }

  bool double_cons(int j) const { return j >= 1 && at(j) == at(j - 1) && cons(j); }

  bool cvc(int i) const {
    if (i < 2 || !cons(i) || cons(i - 1) || !cons(i - 2)) return false;
    const char ch = at(i);
    return ch != 'w' && ch != 'x' && ch != 'y';
  }

  bool ends(std::string_view s) {
    const int len = static_cast<int>(s.size());
    if (len > k_ + 1) return false;
    if (b_.compare(static_cast<size_t>(k_ + 1 - len), s.size(), s) != 0) return false;
    j_ = k_ - len;
    return true;
  }

  void set_to(std::string_view s) {
    b_.replace(static_cast<size_t>(j_ + 1), static_cast<size_t>(k_ - j_), s);
    k_ = j_ + static_cast<int>(s.size());
  }

  void r(std::string_view s) {
    if (m() > 0) set_to(s);
  }

  void step1ab() {
    if (at(k_) == 's') {
      if (ends("sses")) {
        k_ -= 2;
      } else if (ends("ies")) {
        set_to("i");
      } else if (at(k_ - 1) != 's') {
        --k_;
      }
    }
    if (ends("eed")) {
      if (m() > 0) --k_;
    } else if ((ends("ed") || ends("ing")) && vowel_in_stem()) {
      k_ = j_;
      if (ends("at")) {
        set_to("ate");
      } else if (ends("bl")) {
        set_to("ble");
      } else if (ends("iz")) {
        set_to("ize");
      } else if (double_cons(k_)) {
        --k_;
        const char ch = at(k_);
        if (ch == 'l' || ch == 's' || ch == 'z') ++k_;
      } else if (j_ = k_; m() == 1 && cvc(k_)) {
        set_to("e");
      }
    }
    b_.resize(static_cast<size_t>(k_ + 1));
  }

  void step1c() {
    if (ends("y") && vowel_in_stem()) b_[static_cast<size_t>(k_)] = 'i';
  }

  // Tries each (suffix, replacement) pair; stops at the first suffix match.
  template <size_t N>
  bool rules(const std::pair<std::string_view, std::string_view> (&table)[N]) {
    for (const auto& [suffix, repl] : table) {
      if (ends(suffix)) {
        r(repl);
        return true;
      }
    }
    return false;
  }

  void step2() {
    if (k_ < 1) return;
    switch (at(k_ - 1)) {
      case 'a': {
        static constexpr std::pair<std::string_view, std::string_view> t[] = {{"ational", "ate"},
                                                                              {"tional", "tion"}};
        rules(t);
        break;
      }
      case 'c': {
        static constexpr std::pair<std::string_view, std::string_view> t[] = {{"enci", "ence"},
                                                                              {"anci", "ance"}};
        rules(t);
        break;
      }
      case 'e': {
        static constexpr std::pair<std::string_view, std::string_view> t[] = {{"izer", "ize"}};
        rules(t);
        break;
      }
      case 'l': {
        static constexpr std::pair<std::string_view, std::string_view> t[] = {
            {"bli", "ble"}, {"alli", "al"}, {"entli", "ent"}, {"eli", "e"}, {"ousli", "ous"}};
        rules(t);
        break;
      }
      case 'o': {
        static constexpr std::pair<std::string_view, std::string_view> t[] = {
            {"ization", "ize"}, {"ation", "ate"}, {"ator", "ate"}};
        rules(t);
        break;
      }
      case 's': {
        static constexpr std::pair<std::string_view, std::string_view> t[] = {
            {"alism", "al"}, {"iveness", "ive"}, {"fulness", "ful"}, {"ousness", "ous"}};
        rules(t);
        break;
      }
      case 't': {
        static constexpr std::pair<std::string_view, std::string_view> t[] = {
            {"aliti", "al"}, {"iviti", "ive"}, {"biliti", "ble"}};
        rules(t);
        break;
      }
      case 'g': {
        static constexpr std::pair<std::string_view, std::string_view> t[] = {{"logi", "log"}};
        rules(t);
        break;
      }
      default:
        break;
    }
    b_.resize(static_cast<size_t>(k_ + 1));
  }

  void step3() {
    switch (at(k_)) {
      case 'e': {
        static constexpr std::pair<std::string_view, std::string_view> t[] = {
            {"icate", "ic"}, {"ative", ""}, {"alize", "al"}};
        rules(t);
        break;
      }
      case 'i': {
        static constexpr std::pair<std::string_view, std::string_view> t[] = {{"iciti", "ic"}};
        rules(t);
        break;
      }
      case 'l': {
        static constexpr std::pair<std::string_view, std::string_view> t[] = {{"ical", "ic"},
                                                                              {"ful", ""}};
        rules(t);
        break;
      }
      case 's': {
        static constexpr std::pair<std::string_view, std::string_view> t[] = {{"ness", ""}};
        rules(t);
        break;
      }
      default:
        break;
    }
    b_.resize(static_cast<size_t>(k_ + 1));
  }

  void step4() {
    if (k_ < 1) return;
    bool found = false;
    switch (at(k_ - 1)) {
      case 'a': found = ends("al"); break;
      case 'c': found = ends("ance") || ends("ence"); break;
      case 'e': found = ends("er"); break;
      case 'i': found = ends("ic"); break;
      case 'l': found = ends("able") || ends("ible"); break;
      case 'n': found = ends("ant") || ends("ement") || ends("ment") || ends("ent"); break;
      case 'o':
        found = (ends("ion") && j_ >= 0 && (at(j_) == 's' || at(j_) == 't')) || ends("ou");
        break;
      case 's': found = ends("ism"); break;
      case 't': found = ends("ate") || ends("iti"); break;
      case 'u': found = ends("ous"); break;
      case 'v': found = ends("ive"); break;
      case 'z': found = ends("ize"); break;
      default: break;
    }
    if (found && m() > 1) k_ = j_;
    b_.resize(static_cast<size_t>(k_ + 1));
  }

  void step5() {
    j_ = k_;
    if (at(k_) == 'e') {
      const int a = m();
      if (a > 1 || (a == 1 && !cvc(k_ - 1))) --k_;
    }
    if (at(k_) == 'l' && double_cons(k_) && m() > 1) --k_;
    b_.resize(static_cast<size_t>(k_ + 1));
  }

  std::string b_;
  int k_;
  int j_ = 0;
};

}  // namespace

std::string porter_stem(const std::string& word) {
  if (word.size() <= 2) return word;
  return Stemmer(word).run();
}

}  // namespace sagecc

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "mma/data.hpp"
#include "mma/errors.hpp"

using namespace mma;
using namespace mma::data;

namespace {

std::string text_of(const std::vector<int>& ids) {
  std::vector<int> body(ids.begin(), ids.end() - (ids.empty() || ids.back() != kEos ? 0 : 1));
  return detokenize(body);
}

InstructionExample image_question(std::vector<int> cells, const std::string& question) {
  InstructionExample ex;
  ex.image = SyntheticImage{4, std::move(cells)};
  ex.instruction = tokenize(question);
  ex.modality = ModalityTag::TextImage;
  return ex;
}

bool same(const InstructionExample& a, const InstructionExample& b) {
  return a.instruction == b.instruction && a.response == b.response && a.modality == b.modality &&
         a.image.has_value() == b.image.has_value() && (!a.image || a.image->cells == b.image->cells);
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("vocabulary is a bijection of at most 64 symbols with pad at 0") {
  const auto& v = Vocabulary::instance();
  CHECK(v.size() <= 64);
  CHECK(v.symbol(kPad) == "<pad>");
  CHECK(v.symbol(kEos) == "<eos>");
  std::set<std::string> seen;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::string& s = v.symbol(static_cast<int>(i));
    CHECK(seen.insert(s).second);
    CHECK(v.id(s) == static_cast<int>(i));
  }
  for (int c = 0; c < kColorCount; ++c) CHECK(v.color_of(v.color_id(c)) == c);
  CHECK(v.color_of(v.id("7")) == -1);
  CHECK_THROWS_AS(v.id("@"), UnknownSymbol);
}

TEST_CASE("tokenize examples") {
  CHECK(detokenize(tokenize("3+4=?")) == "3+4=?");
  CHECK_THROWS_AS(tokenize("@"), UnknownSymbol);
  CHECK(tokenize("").empty());
  const auto ids = tokenize("count c3?");
  CHECK(ids.size() == 8);
  CHECK(Vocabulary::instance().color_of(ids[6]) == 3);
  CHECK(detokenize(ids) == "count c3?");
  CHECK(tokenize("c9").size() == 2);
}

TEST_CASE("text task examples and determinism") {
  const auto a = gen_text_task(500, 7);
  const auto b = gen_text_task(500, 7);
  REQUIRE(a.size() == 500);
  bool saw_34 = false, saw_93 = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(same(a[i], b[i]));
    CHECK(a[i].modality == ModalityTag::TextOnly);
    CHECK_FALSE(a[i].image.has_value());
    CHECK(a[i].response.back() == kEos);
    const std::string q = detokenize(a[i].instruction);
    if (q == "3+4=?") {
      saw_34 = true;
      CHECK(text_of(a[i].response) == "7");
    }
    if (q == "9+3=?") {
      saw_93 = true;
      CHECK(text_of(a[i].response) == "2");
    }
  }
  CHECK(saw_34);
  CHECK(saw_93);
  CHECK_THROWS_AS(gen_text_task(0, 1), DomainError);
}

TEST_CASE("multimodal task contract") {
  const auto a = gen_multimodal_task(2000, 9);
  const auto b = gen_multimodal_task(2000, 9);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(same(a[i], b[i]));
    REQUIRE(a[i].image.has_value());
    CHECK(a[i].image->cells.size() == 16);
    CHECK(a[i].modality == ModalityTag::TextImage);
    for (int c = 0; c < kColorCount; ++c) CHECK(a[i].image->count(c) <= 9);
  }
}

TEST_CASE("multimodal answers on hand-built grids") {
  std::vector<int> cells(16, 2);
  cells[0] = 1;
  for (int i = 1; i < 8; ++i) cells[static_cast<std::size_t>(i)] = 3;
  CHECK(reference_answer(image_question(cells, "at 0 0?")) == "c1");
  CHECK(reference_answer(image_question(cells, "count c3?")) == "7");
  CHECK(reference_answer(image_question(cells, "count c5?")) == "0");
  std::vector<int> tie(16, 0);
  for (std::size_t i = 8; i < 16; ++i) tie[i] = 1;
  CHECK(reference_answer(image_question(tie, "most?")) == "c0");
  CHECK(SyntheticImage{4, tie}.majority() == 0);
  CHECK_THROWS_AS(reference_answer(image_question(tie, "hello?")), DomainError);
}

TEST_CASE("independent checker agrees with the generators on 10^4 samples") {
  for (const auto& ex : gen_text_task(10000, 21)) CHECK(verify_example(ex));
  for (const auto& ex : gen_multimodal_task(10000, 22)) CHECK(verify_example(ex));
}

TEST_CASE("answer distributions are not degenerate") {
  for (const auto& set : {gen_text_task(10000, 31), gen_multimodal_task(10000, 32)}) {
    std::map<std::string, int> freq;
    for (const auto& ex : set) ++freq[text_of(ex.response)];
    int top = 0;
    for (const auto& [_, n] : freq) top = std::max(top, n);
    CHECK(top <= 4000);
    CHECK(freq.size() >= 8);
  }
}

TEST_CASE("split_dataset examples") {
  const auto all = gen_text_task(100, 3);
  const auto [train, eval] = split_dataset(all, 0.8, 5);
  CHECK(train.size() == 80);
  CHECK(eval.size() == 20);
  std::multiset<std::string> in, out;
  for (const auto& ex : all) in.insert(detokenize(ex.instruction));
  for (const auto* part : {&train, &eval}) {
    for (const auto& ex : *part) out.insert(detokenize(ex.instruction));
  }
  CHECK(in == out);
  const auto [train2, eval2] = split_dataset(all, 0.8, 5);
  for (std::size_t i = 0; i < train.size(); ++i) CHECK(same(train[i], train2[i]));
  CHECK_THROWS_AS(split_dataset(all, 0.0, 1), DomainError);
  CHECK_THROWS_AS(split_dataset(all, 1.0, 1), DomainError);
}

TEST_CASE("records round trip through the text format") {
  auto examples = gen_text_task(20, 1);
  const auto images = gen_multimodal_task(20, 2);
  examples.insert(examples.end(), images.begin(), images.end());
  std::stringstream ss;
  write_records(ss, examples);
  const std::string text = ss.str();
  CHECK(text.find('\r') == std::string::npos);
  CHECK(std::count(text.begin(), text.end(), '\n') == 40);
  CHECK(text.rfind("text\t-\t", 0) == 0);
  const auto back = read_records(ss);
  REQUIRE(back.size() == examples.size());
  for (std::size_t i = 0; i < back.size(); ++i) CHECK(same(back[i], examples[i]));

  std::istringstream bad("image\t-\tmost?\tc1\n");
  CHECK_THROWS(read_records(bad));
}

}

#include "mma/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mma/errors.hpp"
#include "mma/random.hpp"

namespace mma::data {

Vocabulary::Vocabulary() {
  symbols_ = {"<pad>", "<bos>", "<eos>", "<tm-slot>"};
  for (char ch = '0'; ch <= '9'; ++ch) symbols_.emplace_back(1, ch);
  for (char ch = 'a'; ch <= 'z'; ++ch) symbols_.emplace_back(1, ch);
  for (char ch : std::string("+-=? ")) symbols_.emplace_back(1, ch);
  for (int c = 0; c < kColorCount; ++c) symbols_.push_back("c" + std::to_string(c));
}

const Vocabulary& Vocabulary::instance() {
  static const Vocabulary vocab;
  return vocab;
}

const std::string& Vocabulary::symbol(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size()) {
    throw TokenOutOfRange("no symbol for id " + std::to_string(id));
  }
  return symbols_[static_cast<std::size_t>(id)];
}

int Vocabulary::id(std::string_view symbol) const {
  auto it = std::find(symbols_.begin(), symbols_.end(), symbol);
  if (it == symbols_.end()) throw UnknownSymbol("'" + std::string(symbol) + "'");
  return static_cast<int>(it - symbols_.begin());
}

int Vocabulary::color_id(int color) const { return id("c" + std::to_string(color)); }

int Vocabulary::color_of(int id) const {
  const int first = static_cast<int>(symbols_.size()) - kColorCount;
  return id >= first && id < static_cast<int>(symbols_.size()) ? id - first : -1;
}

std::vector<int> tokenize(std::string_view text) {
  const Vocabulary& vocab = Vocabulary::instance();
  std::vector<int> ids;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == 'c' && i + 1 < text.size() && text[i + 1] >= '0' &&
        text[i + 1] < '0' + kColorCount) {
      ids.push_back(vocab.id(text.substr(i, 2)));
      ++i;
      continue;
    }
    ids.push_back(vocab.id(text.substr(i, 1)));
  }
  return ids;
}

std::string detokenize(const std::vector<int>& ids) {
  const Vocabulary& vocab = Vocabulary::instance();
  std::string text;
  for (int id : ids) text += vocab.symbol(id);
  return text;
}

int SyntheticImage::count(int color) const {
  return static_cast<int>(std::count(cells.begin(), cells.end(), color));
}

int SyntheticImage::majority() const {
  int best = 0;
  for (int c = 1; c < kColorCount; ++c) {
    if (count(c) > count(best)) best = c;
  }
  return best;
}

namespace {

std::vector<int> with_eos(std::vector<int> ids) {
  ids.push_back(kEos);
  return ids;
}

}  // namespace

std::vector<InstructionExample> gen_text_task(std::size_t count, std::uint64_t seed) {
  if (count == 0) throw DomainError("gen_text_task needs count >= 1");
  Rng rng(seed);
  std::vector<InstructionExample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t a = rng.index(10);
    const std::size_t b = rng.index(10);
    InstructionExample ex;
    ex.instruction = tokenize(std::to_string(a) + "+" + std::to_string(b) + "=?");
    ex.response = with_eos(tokenize(std::to_string((a + b) % 10)));
    ex.modality = ModalityTag::TextOnly;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<InstructionExample> gen_multimodal_task(std::size_t count, std::uint64_t seed,
                                                    std::size_t grid_size) {
  if (count == 0) throw DomainError("gen_multimodal_task needs count >= 1");
  if (grid_size == 0 || grid_size > 10) throw DomainError("grid size must lie in [1, 10]");
  Rng rng(seed);
  std::vector<InstructionExample> out;
  out.reserve(count);
  while (out.size() < count) {
    SyntheticImage image{grid_size, std::vector<int>(grid_size * grid_size)};
    for (int& cell : image.cells) cell = static_cast<int>(rng.index(kColorCount));
    bool fits = true;
    for (int c = 0; c < kColorCount; ++c) fits = fits && image.count(c) <= 9;
    if (!fits) continue;

    InstructionExample ex;
    switch (rng.index(3)) {
      case 0: {
        const int color = static_cast<int>(rng.index(kColorCount));
        ex.instruction = tokenize("count c" + std::to_string(color) + "?");
        ex.response = with_eos(tokenize(std::to_string(image.count(color))));
        break;
      }
      case 1:
        ex.instruction = tokenize("most?");
        ex.response = with_eos(tokenize("c" + std::to_string(image.majority())));
        break;
      default: {
        const std::size_t row = rng.index(grid_size);
        const std::size_t col = rng.index(grid_size);
        ex.instruction = tokenize("at " + std::to_string(row) + " " + std::to_string(col) + "?");
        ex.response = with_eos(tokenize("c" + std::to_string(image.at(row, col))));
        break;
      }
    }
    ex.image = std::move(image);
    ex.modality = ModalityTag::TextImage;
    out.push_back(std::move(ex));
  }
  return out;
}

std::string reference_answer(const InstructionExample& example) {
  const std::string text = detokenize(example.instruction);
  if (!example.image) {
    int a = 0, b = 0;
    char plus = 0, eq = 0, q = 0;
    std::istringstream in(text);
    if (!(in >> a >> plus >> b >> eq >> q) || plus != '+' || eq != '=' || q != '?') {
      throw DomainError("unrecognised text instruction '" + text + "'");
    }
    return std::to_string((a + b) % 10);
  }
  const SyntheticImage& grid = *example.image;
  if (text == "most?") {
    std::vector<int> histogram(kColorCount, 0);
    for (int cell : grid.cells) ++histogram[static_cast<std::size_t>(cell)];
    const auto top = std::max_element(histogram.begin(), histogram.end());
    return "c" + std::to_string(top - histogram.begin());
  }
  if (text.rfind("count c", 0) == 0 && text.size() == 9 && text.back() == '?') {
    const int color = text[7] - '0';
    int n = 0;
    for (int cell : grid.cells) n += cell == color;
    return std::to_string(n);
  }
  if (text.rfind("at ", 0) == 0 && text.size() == 7 && text.back() == '?') {
    const std::size_t row = static_cast<std::size_t>(text[3] - '0');
    const std::size_t col = static_cast<std::size_t>(text[5] - '0');
    return "c" + std::to_string(grid.cells.at(row * grid.grid_size + col));
  }
  throw DomainError("unrecognised image instruction '" + text + "'");
}

bool verify_example(const InstructionExample& example) {
  if (example.response.empty() || example.response.back() != kEos) return false;
  if ((example.modality == ModalityTag::TextImage) != example.image.has_value()) return false;
  std::vector<int> body(example.response.begin(), example.response.end() - 1);
  return detokenize(body) == reference_answer(example);
}

std::pair<std::vector<InstructionExample>, std::vector<InstructionExample>> split_dataset(
    const std::vector<InstructionExample>& examples, double train_frac, std::uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) {
    throw DomainError("train_frac must lie in (0, 1)");
  }
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng.engine());
  const auto n_train =
      static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(examples.size())));
  std::pair<std::vector<InstructionExample>, std::vector<InstructionExample>> out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_train ? out.first : out.second).push_back(examples[order[i]]);
  }
  return out;
}

namespace {

std::string grid_text(const SyntheticImage& image) {
  std::string out;
  for (std::size_t r = 0; r < image.grid_size; ++r) {
    if (r) out += '/';
    for (std::size_t c = 0; c < image.grid_size; ++c) out += static_cast<char>('0' + image.at(r, c));
  }
  return out;
}

SyntheticImage parse_grid(const std::string& text) {
  SyntheticImage image;
  std::size_t rows = 1;
  for (char ch : text) {
    if (ch == '/') {
      ++rows;
    } else if (ch >= '0' && ch < '0' + kColorCount) {
      image.cells.push_back(ch - '0');
    } else {
      throw DomainError("bad grid character in '" + text + "'");
    }
  }
  if (rows * rows != image.cells.size()) throw DomainError("grid '" + text + "' is not square");
  image.grid_size = rows;
  return image;
}

}  // namespace

void write_records(std::ostream& out, const std::vector<InstructionExample>& examples) {
  for (const InstructionExample& ex : examples) {
    std::vector<int> body(ex.response.begin(), ex.response.end() - 1);
    out << modality_name(ex.modality) << '\t' << (ex.image ? grid_text(*ex.image) : "-") << '\t'
        << detokenize(ex.instruction) << '\t' << detokenize(body) << '\n';
  }
}

std::vector<InstructionExample> read_records(std::istream& in) {
  std::vector<InstructionExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1) {
      fields.push_back(line.substr(start, tab - start));
    }
    fields.push_back(line.substr(start));
    if (fields.size() != 4) {
      throw DomainError("record " + std::to_string(line_no) + ": expected 4 fields");
    }
    InstructionExample ex;
    ex.modality = parse_modality(fields[0]);
    if (fields[1] != "-") ex.image = parse_grid(fields[1]);
    if ((ex.modality == ModalityTag::TextImage) != ex.image.has_value()) {
      throw ModalityMismatch("record " + std::to_string(line_no));
    }
    ex.instruction = tokenize(fields[2]);
    ex.response = with_eos(tokenize(fields[3]));
    out.push_back(std::move(ex));
  }
  return out;
}

void save_records(const std::string& path, const std::vector<InstructionExample>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_records(out, examples);
  if (!out) throw IoError("write to '" + path + "' failed");
}

std::vector<InstructionExample> load_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return read_records(in);
}

}  // namespace mma::data

#pragma once
// Character-level vocabulary and the synthetic instruction tasks.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mma/adapters.hpp"

namespace mma::data {

constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kEos = 2;
constexpr int kTmSlot = 3;
constexpr int kColorCount = 8;

/// Fixed symbol table: <pad> <bos> <eos> <tm-slot>, 0-9, a-z, "+-=? ", c0-c7.
class Vocabulary {
 public:
  static const Vocabulary& instance();

  std::size_t size() const { return symbols_.size(); }
  const std::string& symbol(int id) const;
  int id(std::string_view symbol) const;  // throws UnknownSymbol
  int color_id(int color) const;          // id of symbol "c<color>"
  // Color index 0..7 for a color token, -1 otherwise.
  int color_of(int id) const;

 private:
  Vocabulary();
  std::vector<std::string> symbols_;
};

// Greedy: "c" followed by 0-7 is one color symbol, everything else is one char.
std::vector<int> tokenize(std::string_view text);
std::string detokenize(const std::vector<int>& ids);

struct SyntheticImage {
  std::size_t grid_size = 4;
  std::vector<int> cells;  // row-major color indices in [0, 8)

  int at(std::size_t row, std::size_t col) const { return cells[row * grid_size + col]; }
  int count(int color) const;
  // Most frequent color, ties to the lowest index.
  int majority() const;
  // Patch token sequence for the encoder (one color index per cell).
  const std::vector<int>& patch_tokens() const { return cells; }
};

struct InstructionExample {
  std::optional<SyntheticImage> image;
  std::vector<int> instruction;
  std::vector<int> response;  // ends with <eos>
  ModalityTag modality = ModalityTag::TextOnly;
};

// "a+b=?" -> (a+b) mod 10.
std::vector<InstructionExample> gen_text_task(std::size_t count, std::uint64_t seed);

// "count cX?", "most?", "at r c?" over random grids whose color counts are all <= 9.
std::vector<InstructionExample> gen_multimodal_task(std::size_t count, std::uint64_t seed,
                                                    std::size_t grid_size = 4);

// Recomputes the answer from the instruction text (and grid) by parsing, not
// by the generator's bookkeeping. Returns the expected response text.
std::string reference_answer(const InstructionExample& example);
bool verify_example(const InstructionExample& example);

std::pair<std::vector<InstructionExample>, std::vector<InstructionExample>> split_dataset(
    const std::vector<InstructionExample>& examples, double train_frac, std::uint64_t seed);

// modality<TAB>grid-or-dash<TAB>instruction<TAB>response, one record per line.
void write_records(std::ostream& out, const std::vector<InstructionExample>& examples);
std::vector<InstructionExample> read_records(std::istream& in);
void save_records(const std::string& path, const std::vector<InstructionExample>& examples);
std::vector<InstructionExample> load_records(const std::string& path);

}  // namespace mma::data

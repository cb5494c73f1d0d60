#pragma once
// Binary checkpoint container:
//   "MMACKPT1" | u32 version | u32 count |
//   count x { u32 name_len | name | u8 dtype (0 = f32) | u8 rank | rank x u32 dim | f32 payload }
//   | u64 CRC-64 of everything before it.
// All integers and floats little-endian.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mma/adapters.hpp"
#include "mma/model.hpp"
#include "mma/tensor.hpp"

namespace mma {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

std::uint64_t crc64(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_checkpoint(std::span<const CheckpointEntry> entries);
std::vector<CheckpointEntry> decode_checkpoint(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes);

struct CheckpointMeta {
  std::uint64_t step = 0;
  std::string config_text;  // effective run config, key = value lines
};

// theta_a plus "meta.step" and "meta.config".
void save_checkpoint(const MultimodalModel& model, const std::string& path,
                     const CheckpointMeta& meta = {});
// Overwrites theta_a in place; the checkpoint must hold exactly the model's names and shapes.
CheckpointMeta load_checkpoint(const MultimodalModel& model, const std::string& path);
CheckpointMeta read_checkpoint_meta(const std::string& path);

// Modality-specialised export: theta_a outside the LM adapters, plus
// "llm.blocks.<i>.merged_delta" = combined - I for each block.
void save_merged_checkpoint(const MultimodalModel& model, std::span<const MergedAdapter> merged,
                            const std::string& path, const CheckpointMeta& meta = {});

struct MergedCheckpoint {
  CheckpointMeta meta;
  ModalityTag modality = ModalityTag::TextOnly;
  std::vector<MergedAdapter> merged;
};
MergedCheckpoint load_merged_checkpoint(const MultimodalModel& model, const std::string& path);

// Every parameter, frozen and trainable, in the same container.
void save_full_model(const MultimodalModel& model, const std::string& path);

// SHA-256 hex digest over the raw bytes of every frozen tensor, in order.
std::string frozen_digest(const MultimodalModel& model);

}  // namespace mma

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "condense/errors.hpp"
#include "condense/geometry.hpp"
#include "condense/train.hpp"

namespace condense {

/// Byte-level token ids of a file, read in fixed-size chunks.
std::vector<std::size_t> ingest_corpus(const std::filesystem::path& path);

// --- Trace files -----------------------------------------------------------
//
// Layout (little-endian): "EMTR", u32 version, u32 layer_count, u32 N, u32 d,
// u32 flags, then layer_count * N * d float32 values, layer-major and
// row-major. layer_count counts every stored matrix; when flags bit 0 is set
// the last one is the post-final-norm output.

inline constexpr std::uint32_t kTraceVersion = 1;
inline constexpr std::uint32_t kTraceFlagFinalNorm = 1u;

enum class TraceErrorCode { io, bad_magic, version_mismatch, bad_header, truncated_payload, trailing_bytes };
std::string_view to_string(TraceErrorCode c);

class TraceError : public DataError {
 public:
  TraceError(TraceErrorCode code, const std::string& detail);
  TraceErrorCode code() const { return code_; }

 private:
  TraceErrorCode code_;
};

std::string encode_trace(const EmbeddingTrace& trace);
EmbeddingTrace decode_trace(std::string_view bytes, std::string sequence_id);
void write_trace(const EmbeddingTrace& trace, const std::filesystem::path& path);
/// The sequence id of the result is the file stem.
EmbeddingTrace read_trace(const std::filesystem::path& path);

// --- Checkpoints -----------------------------------------------------------
//
// "CKPT", u32 version, u32 length + UTF-8 JSON (configs, step, metric log,
// parameter names and shapes), then float32 parameter blobs in declaration
// order, then the Adam first and second moments in the same order.

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// --- Files -----------------------------------------------------------------

/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace condense

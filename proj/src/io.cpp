#include "condense/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <system_error>

#include <nlohmann/json.hpp>

#include "condense/config.hpp"
#include "condense/report.hpp"

namespace condense {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Files

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw DataError("read error on " + path.string());
  return bytes;
}

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot create " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write error on " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw DataError("cannot rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

std::vector<std::size_t> ingest_corpus(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("corpus not found: " + path.string());
  std::vector<std::size_t> ids;
  std::vector<char> chunk(1 << 16);
  while (in) {
    in.read(chunk.data(), static_cast<std::streamsize>(chunk.size()));
    const auto got = static_cast<std::size_t>(in.gcount());
    for (std::size_t i = 0; i < got; ++i) ids.push_back(static_cast<unsigned char>(chunk[i]));
  }
  if (in.bad()) throw DataError("read error on corpus " + path.string());
  if (ids.empty()) throw DataError("empty corpus: " + path.string());
  return ids;
}

// ---------------------------------------------------------------------------
// Little-endian encoding

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(std::string_view in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return v;
}

void put_floats(std::string& out, std::span<const float> values) {
  out.reserve(out.size() + values.size() * 4);
  for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

void get_floats(std::string_view in, std::size_t off, std::span<float> out) {
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::bit_cast<float>(get_u32(in, off + 4 * i));
}

std::uint32_t narrow_u32(std::size_t v, const char* what) {
  if (v > UINT32_MAX) throw std::invalid_argument(std::string(what) + " exceeds u32 range");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

// ---------------------------------------------------------------------------
// Trace files

std::string_view to_string(TraceErrorCode c) {
  switch (c) {
    case TraceErrorCode::io: return "io error";
    case TraceErrorCode::bad_magic: return "bad magic";
    case TraceErrorCode::version_mismatch: return "version mismatch";
    case TraceErrorCode::bad_header: return "bad header";
    case TraceErrorCode::truncated_payload: return "truncated payload";
    case TraceErrorCode::trailing_bytes: return "trailing bytes";
  }
  return "?";
}

TraceError::TraceError(TraceErrorCode code, const std::string& detail)
    : DataError(std::string(to_string(code)) + ": " + detail), code_(code) {}

std::string encode_trace(const EmbeddingTrace& trace) {
  trace.validate();
  const std::size_t n = trace.token_count(), d = trace.dim();
  const std::size_t count = trace.layers.size() + (trace.final_norm ? 1 : 0);
  std::string out = "EMTR";
  put_u32(out, kTraceVersion);
  put_u32(out, narrow_u32(count, "layer count"));
  put_u32(out, narrow_u32(n, "token count"));
  put_u32(out, narrow_u32(d, "dimension"));
  put_u32(out, trace.final_norm ? kTraceFlagFinalNorm : 0u);
  for (const auto& l : trace.layers) put_floats(out, l.data());
  if (trace.final_norm) put_floats(out, trace.final_norm->data());
  return out;
}

EmbeddingTrace decode_trace(std::string_view bytes, std::string sequence_id) {
  constexpr std::size_t header = 24;
  if (bytes.size() < 4 || bytes.substr(0, 4) != "EMTR") {
    throw TraceError(TraceErrorCode::bad_magic, sequence_id);
  }
  if (bytes.size() < header) throw TraceError(TraceErrorCode::truncated_payload, sequence_id + ": short header");
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kTraceVersion) {
    throw TraceError(TraceErrorCode::version_mismatch,
                     sequence_id + ": file version " + std::to_string(version) + ", expected " +
                         std::to_string(kTraceVersion));
  }
  const std::uint32_t count = get_u32(bytes, 8), n = get_u32(bytes, 12), d = get_u32(bytes, 16);
  const std::uint32_t flags = get_u32(bytes, 20);
  const bool has_final = (flags & kTraceFlagFinalNorm) != 0;
  if ((flags & ~kTraceFlagFinalNorm) != 0 || count < (has_final ? 3u : 2u) || n == 0 || d == 0) {
    throw TraceError(TraceErrorCode::bad_header, sequence_id);
  }
  const std::size_t per_layer = static_cast<std::size_t>(n) * d;
  const std::size_t expected = header + static_cast<std::size_t>(count) * per_layer * 4;
  if (bytes.size() < expected) {
    throw TraceError(TraceErrorCode::truncated_payload,
                     sequence_id + ": " + std::to_string(bytes.size()) + " bytes, expected " +
                         std::to_string(expected));
  }
  if (bytes.size() > expected) throw TraceError(TraceErrorCode::trailing_bytes, sequence_id);

  EmbeddingTrace t;
  t.sequence_id = std::move(sequence_id);
  const std::size_t blocks = count - (has_final ? 1 : 0);
  for (std::size_t l = 0; l < count; ++l) {
    TensorF m(Shape{n, d});
    get_floats(bytes, header + l * per_layer * 4, m.data());
    if (l < blocks) {
      t.layers.push_back(std::move(m));
    } else {
      t.final_norm = std::move(m);
    }
  }
  return t;
}

void write_trace(const EmbeddingTrace& trace, const fs::path& path) {
  write_file_atomic(path, encode_trace(trace));
}

EmbeddingTrace read_trace(const fs::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const DataError& e) {
    throw TraceError(TraceErrorCode::io, e.what());
  }
  return decode_trace(bytes, path.stem().string());
}

// ---------------------------------------------------------------------------
// Checkpoints

std::string encode_checkpoint(const Checkpoint& ck) {
  ojson meta;
  meta["model"] = to_json(ck.state.model);
  meta["train"] = to_json(ck.train);
  meta["loss"] = to_json(ck.train.loss);
  meta["step"] = ck.state.step;
  ojson params = ojson::array();
  for (std::size_t i = 0; i < ck.state.params.names.size(); ++i) {
    params.push_back(ojson{{"name", ck.state.params.names[i]}, {"shape", ck.state.params.tensors[i].shape()}});
  }
  meta["params"] = std::move(params);
  ojson steps = ojson::array();
  for (const auto& m : ck.log.steps) steps.push_back(to_json(m));
  ojson snaps = ojson::array();
  for (const auto& s : ck.log.snapshots) snaps.push_back(ojson{{"step", s.step}, {"summary", to_json(s.summary)}});
  meta["log"] = ojson{{"steps", std::move(steps)}, {"snapshots", std::move(snaps)}};
  const std::string text = meta.dump();

  std::string out = "CKPT";
  put_u32(out, kCheckpointVersion);
  put_u32(out, narrow_u32(text.size(), "checkpoint header"));
  out += text;
  for (const auto& t : ck.state.params.tensors) put_floats(out, t.data());
  for (const auto& t : ck.state.adam_m) put_floats(out, t.data());
  for (const auto& t : ck.state.adam_v) put_floats(out, t.data());
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 12 || bytes.substr(0, 4) != "CKPT") throw DataError("checkpoint: bad magic");
  if (get_u32(bytes, 4) != kCheckpointVersion) throw DataError("checkpoint: version mismatch");
  const std::size_t len = get_u32(bytes, 8);
  if (bytes.size() < 12 + len) throw DataError("checkpoint: truncated header");
  Checkpoint ck;
  std::size_t total = 0;
  try {
    const json meta = json::parse(bytes.substr(12, len));
    ck.state.model = model_from_json(meta.at("model"));
    ck.train = train_from_json(meta.at("train"));
    ck.train.loss = loss_from_json(meta.at("loss"));
    ck.state.step = meta.at("step").get<std::size_t>();
    for (const auto& p : meta.at("params")) {
      ck.state.params.names.push_back(p.at("name").get<std::string>());
      ck.state.params.tensors.emplace_back(p.at("shape").get<Shape>());
      total += ck.state.params.tensors.back().size();
    }
    for (const auto& m : meta.at("log").at("steps")) ck.log.steps.push_back(step_metrics_from_json(m));
    for (const auto& s : meta.at("log").at("snapshots")) {
      ck.log.snapshots.push_back(Snapshot{s.at("step").get<std::size_t>(), summary_from_json(s.at("summary"))});
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: malformed header: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
  const std::size_t expected = 12 + len + 3 * total * 4;
  if (bytes.size() != expected) {
    throw DataError("checkpoint: payload is " + std::to_string(bytes.size()) + " bytes, expected " +
                    std::to_string(expected));
  }
  std::size_t off = 12 + len;
  auto fill = [&](TensorF& t) {
    get_floats(bytes, off, t.data());
    off += t.size() * 4;
  };
  for (auto& t : ck.state.params.tensors) fill(t);
  for (const auto& t : ck.state.params.tensors) {
    ck.state.adam_m.emplace_back(t.shape());
    fill(ck.state.adam_m.back());
  }
  for (const auto& t : ck.state.params.tensors) {
    ck.state.adam_v.emplace_back(t.shape());
    fill(ck.state.adam_v.back());
  }
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const fs::path& path) {
  write_file_atomic(path, encode_checkpoint(ck));
}

Checkpoint load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace condense

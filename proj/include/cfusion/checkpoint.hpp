#pragma once

// CFCK checkpoint container.
//
//   "CFCK" | u32 version | str strategy | u64 config_hash | str config_text |
//   u32 tensors | manifest (str name, u8 dtype, u32 rows, u32 cols,
//   u64 offset) | u64 payload_bytes | payload (little-endian f32) |
//   u64 fnv1a(payload)
//
// Trainable parameters and normalization buffers share the manifest; the
// buffers are prefixed "buffer." and never reach the optimizer.

#include "cfusion/binio.hpp"
#include "cfusion/config.hpp"
#include "cfusion/dataset.hpp"
#include "cfusion/params.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace cfusion {

inline constexpr char kCheckpointMagic[4] = {'C', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kBufferPrefix = "buffer.";

struct Checkpoint {
  TrainConfig config;
  ParameterSet<float> params;
  Normalizer norm;

  bool operator==(const Checkpoint& o) const {
    return config == o.config && params == o.params && norm == o.norm;
  }
};

namespace detail {

inline void put_buffer(ParameterSet<float>& out, const std::string& name, const std::vector<double>& v) {
  Matrix<float> m(static_cast<Eigen::Index>(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = static_cast<float>(v[i]);
  out.add(kBufferPrefix + name, std::move(m));
}

inline std::vector<double> take_buffer(const ParameterSet<float>& in, const std::string& name) {
  const auto key = std::string(kBufferPrefix) + name;
  if (!in.contains(key)) throw FormatError(FormatError::Kind::kCorrupt, "checkpoint lacks buffer " + name);
  const auto& m = in.at(key);
  std::vector<double> v(static_cast<std::size_t>(m.size()));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = m.data()[i];
  return v;
}

inline ParameterSet<float> normalizer_buffers(const Normalizer& n) {
  ParameterSet<float> b;
  put_buffer(b, "action_scale", n.action_scale);
  put_buffer(b, "visual_mean", n.visual_mean);
  put_buffer(b, "visual_std", n.visual_std);
  put_buffer(b, "proprio_mean", n.proprio_mean);
  put_buffer(b, "proprio_std", n.proprio_std);
  put_buffer(b, "torque_mean", n.torque_mean);
  put_buffer(b, "torque_std", n.torque_std);
  return b;
}

}  // namespace detail

/// Normalization statistics are stored as f32, so a checkpointed normalizer
/// is the f32 rounding of the fitted one.
inline Normalizer round_to_f32(Normalizer n) {
  for (auto* v : {&n.action_scale, &n.visual_mean, &n.visual_std, &n.proprio_mean, &n.proprio_std, &n.torque_mean,
                  &n.torque_std}) {
    for (double& x : *v) x = static_cast<float>(x);
  }
  return n;
}

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  const auto text = serialize(ck.config);
  auto buffers = detail::normalizer_buffers(ck.norm);
  std::vector<std::pair<const std::string*, const Matrix<float>*>> entries;
  for (const auto& [name, m] : ck.params.tensors()) {
    if (name.rfind(kBufferPrefix, 0) == 0) throw ValidationError("parameter name uses reserved prefix: " + name);
    entries.emplace_back(&name, &m);
  }
  for (const auto& [name, m] : buffers.tensors()) entries.emplace_back(&name, &m);

  io::ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.str(to_string(ck.config.strategy));
  w.u64(io::fnv1a(text));
  w.str(text);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, m] : entries) {
    w.str(*name);
    w.u8(0);  // f32
    w.u32(static_cast<std::uint32_t>(m->rows()));
    w.u32(static_cast<std::uint32_t>(m->cols()));
    w.u64(offset);
    offset += static_cast<std::uint64_t>(m->size()) * 4;
  }
  w.u64(offset);
  io::ByteWriter payload;
  for (const auto& [name, m] : entries) {
    // Column-major, as stored by Eigen.
    for (Eigen::Index i = 0; i < m->size(); ++i) payload.f32(m->data()[i]);
  }
  w.bytes().insert(w.bytes().end(), payload.bytes().begin(), payload.bytes().end());
  const std::string_view pv(reinterpret_cast<const char*>(payload.bytes().data()), payload.size());
  w.u64(io::fnv1a(pv));
  return w.bytes();
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, std::optional<StrategyTag> expected,
                                    const std::string& context = "checkpoint") {
  using Kind = FormatError::Kind;
  io::ByteReader r(bytes, context);
  if (bytes.size() < 4 || r.raw(4) != std::string_view(kCheckpointMagic, 4)) {
    throw FormatError(Kind::kMagic, context + ": not a CFCK checkpoint");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(Kind::kVersion, context + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto tag_text = r.str();
  const auto stored_hash = r.u64();
  const auto text = r.str();
  if (io::fnv1a(text) != stored_hash) {
    throw FormatError(Kind::kHashMismatch, context + ": config hash does not match the stored config");
  }
  Checkpoint ck;
  try {
    ck.config = parse_config(text, context + " (embedded config)").train;
  } catch (const ValidationError& e) {
    throw FormatError(Kind::kCorrupt, e.what());
  }
  if (to_string(ck.config.strategy) != tag_text) {
    throw FormatError(Kind::kCorrupt, context + ": strategy tag disagrees with the embedded config");
  }
  if (expected && *expected != ck.config.strategy) {
    throw FormatError(Kind::kStrategyMismatch, context + ": checkpoint holds strategy '" + tag_text +
                                                   "' but '" + std::string(to_string(*expected)) +
                                                   "' was requested");
  }
  struct Entry {
    std::string name;
    std::uint32_t rows, cols;
    std::uint64_t offset;
  };
  const auto count = r.u32();
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str();
    if (r.u8() != 0) throw FormatError(Kind::kCorrupt, context + ": unsupported tensor dtype");
    e.rows = r.u32();
    e.cols = r.u32();
    e.offset = r.u64();
    entries.push_back(std::move(e));
  }
  const auto payload_bytes = r.u64();
  const auto start = r.position();
  if (r.remaining() < 8 || r.remaining() - 8 != payload_bytes) {
    throw FormatError(Kind::kCorrupt, context + ": payload size mismatch (truncated?)");
  }
  const std::string_view pv(reinterpret_cast<const char*>(bytes.data() + start), payload_bytes);
  r.seek(start + payload_bytes);
  if (r.u64() != io::fnv1a(pv)) throw FormatError(Kind::kCorrupt, context + ": payload checksum mismatch");
  ParameterSet<float> all;
  for (const auto& e : entries) {
    const std::uint64_t size = static_cast<std::uint64_t>(e.rows) * e.cols * 4;
    if (e.offset > payload_bytes || size > payload_bytes - e.offset) {
      throw FormatError(Kind::kCorrupt, context + ": tensor " + e.name + " exceeds payload");
    }
    r.seek(start + e.offset);
    Matrix<float> m(e.rows, e.cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.f32();
    try {
      all.add(e.name, std::move(m));
    } catch (const std::invalid_argument&) {
      throw FormatError(Kind::kCorrupt, context + ": duplicate tensor " + e.name);
    }
  }
  for (const auto& [name, m] : all.tensors()) {
    if (name.rfind(kBufferPrefix, 0) != 0) ck.params.add(name, m);
  }
  ck.norm.action_scale = detail::take_buffer(all, "action_scale");
  ck.norm.visual_mean = detail::take_buffer(all, "visual_mean");
  ck.norm.visual_std = detail::take_buffer(all, "visual_std");
  ck.norm.proprio_mean = detail::take_buffer(all, "proprio_mean");
  ck.norm.proprio_std = detail::take_buffer(all, "proprio_std");
  ck.norm.torque_mean = detail::take_buffer(all, "torque_mean");
  ck.norm.torque_std = detail::take_buffer(all, "torque_std");
  // The parameter set must match the layout the config describes.
  FusionModel model(ck.config.strategy_config(), ck.config.model_shape());
  const auto reference = model.init<float>(0);
  bool layout_ok = reference.size() == ck.params.size();
  for (const auto& [name, m] : reference.tensors()) {
    if (!layout_ok) break;
    layout_ok = ck.params.contains(name) && ck.params.at(name).rows() == m.rows() &&
                ck.params.at(name).cols() == m.cols();
  }
  if (!layout_ok) throw FormatError(Kind::kCorrupt, context + ": tensors do not match the strategy layout");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  io::write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<StrategyTag> expected = {}) {
  return decode_checkpoint(io::read_file(path), expected, path.string());
}

}  // namespace cfusion

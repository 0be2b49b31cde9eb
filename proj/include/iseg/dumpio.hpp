#pragma once

// Attention-dump container shared with the extraction sidecar.
//
//   magic "ISEGATTN" | version u32 | header_len u32 | header JSON | payload
//
// Integers are little-endian. The header is compact JSON with sorted keys;
// the payload holds float32 little-endian row-major tensors, back to back in
// the order of the header's tensor directory. See docs/dump_format.md.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <iterator>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "iseg/attention.hpp"
#include "iseg/resample.hpp"
#include "iseg/types.hpp"

namespace iseg {

inline constexpr std::array<char, 8> kDumpMagic{'I', 'S', 'E', 'G', 'A', 'T', 'T', 'N'};
inline constexpr std::uint32_t kDumpVersion = 1;
inline constexpr double kStochasticTolerance = 1e-3;

/// How Cat-Cross was applied. `embedding`: the producer scaled category text
/// embeddings by gamma before the forward pass, so stored Q/K already carry it.
/// `offline`: Q/K come from an unmodified pass and gamma is applied here.
enum class Pathway { offline, embedding };

inline const char* to_string(Pathway p) { return p == Pathway::offline ? "offline" : "embedding"; }

inline Pathway parse_pathway(const std::string& s) {
  if (s == "offline") return Pathway::offline;
  if (s == "embedding") return Pathway::embedding;
  throw ValidationError("unknown pathway '" + s + "'");
}

struct CrossQK {
  std::string name;
  Grid grid;
  Matrix q;  // HW_l x dk
  Matrix k;  // T x dk
  double d = 1.0;
};

struct AttnDump {
  std::string image_id;
  int timestep = 100;
  Pathway pathway = Pathway::offline;
  double gamma_applied = 1.0;
  Grid image_size;
  SelfAttentionMap self_attention;
  std::vector<CrossQK> cross;
  TokenMeta token_meta;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

inline void put_tensor(std::string& out, const Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(m(i, j))));
}

inline nlohmann::json grid_json(Grid g) { return nlohmann::json::array({g.rows, g.cols}); }

inline Grid grid_from(const nlohmann::json& j, const char* field) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number_integer() || !j[1].is_number_integer())
    throw ValidationError(std::string(field) + " must be [rows, cols]");
  Grid g{j[0].get<int>(), j[1].get<int>()};
  if (g.rows < 1 || g.cols < 1) throw ValidationError(std::string(field) + " must be positive");
  return g;
}

}  // namespace detail

inline nlohmann::json to_json(const TokenMeta& m) {
  nlohmann::json cats = nlohmann::json::array();
  for (const auto& c : m.categories) cats.push_back({{"name", c.name}, {"positions", c.positions}});
  return {{"tokens", m.tokens}, {"categories", cats}, {"background_indices", m.background_indices}, {"gamma", m.gamma}};
}

inline TokenMeta token_meta_from_json(const nlohmann::json& j) {
  TokenMeta m;
  try {
    m.tokens = j.at("tokens").get<std::vector<std::string>>();
    for (const auto& c : j.at("categories"))
      m.categories.push_back({c.at("name").get<std::string>(), c.at("positions").get<std::vector<int>>()});
    m.background_indices = j.at("background_indices").get<std::vector<int>>();
    m.gamma = j.at("gamma").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("token_meta: ") + e.what());
  }
  return m;
}

/// Serializes `dump` byte-exactly. Tensors are converted to float32.
inline std::string encode_dump(const AttnDump& dump) {
  const auto hw = static_cast<Eigen::Index>(dump.self_attention.grid.size());
  if (dump.self_attention.data.rows() != hw || dump.self_attention.data.cols() != hw)
    throw ShapeError("self_attention: expected " + std::to_string(hw) + "x" + std::to_string(hw));

  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  auto add = [&](const std::string& name, const Matrix& m) {
    const std::uint64_t len = static_cast<std::uint64_t>(m.size()) * 4;
    tensors.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"dtype", "f32le"}, {"offset", offset}, {"length", len}});
    offset += len;
  };
  add("self_attention", dump.self_attention.data);
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < dump.cross.size(); ++l) {
    const auto& c = dump.cross[l];
    if (static_cast<std::size_t>(c.q.rows()) != c.grid.size())
      throw ShapeError("cross layer '" + c.name + "' q rows do not match its resolution");
    const std::string base = "cross." + std::to_string(l);
    add(base + ".q", c.q);
    add(base + ".k", c.k);
    layers.push_back({{"name", c.name}, {"resolution", detail::grid_json(c.grid)}, {"d", c.d}, {"q", base + ".q"}, {"k", base + ".k"}});
  }
  const nlohmann::json header = {{"image_id", dump.image_id},
                                 {"timestep", dump.timestep},
                                 {"pathway", to_string(dump.pathway)},
                                 {"gamma_applied", dump.gamma_applied},
                                 {"working_resolution", detail::grid_json(dump.self_attention.grid)},
                                 {"image_size", detail::grid_json(dump.image_size)},
                                 {"token_meta", to_json(dump.token_meta)},
                                 {"cross_layers", layers},
                                 {"tensors", tensors}};
  const std::string text = header.dump();

  std::string out(kDumpMagic.begin(), kDumpMagic.end());
  detail::put_u32(out, kDumpVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out.reserve(out.size() + offset);
  detail::put_tensor(out, dump.self_attention.data);
  for (const auto& c : dump.cross) {
    detail::put_tensor(out, c.q);
    detail::put_tensor(out, c.k);
  }
  return out;
}

inline void write_dump(const AttnDump& dump, std::ostream& sink) {
  const std::string bytes = encode_dump(dump);
  sink.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!sink) throw IoError("failed writing attention dump '" + dump.image_id + "'");
}

/// Parses and validates a dump: magic, version, shapes against payload
/// lengths, finite values, and self-attention rows summing to 1 within 1e-3.
inline AttnDump decode_dump(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16) throw TruncationError("dump truncated: " + std::to_string(bytes.size()) + " bytes, preamble needs 16");
  if (!std::equal(kDumpMagic.begin(), kDumpMagic.end(), bytes.begin())) throw ValidationError("bad magic: not an ISEGATTN dump");
  const std::uint32_t version = detail::get_u32(p + 8);
  if (version != kDumpVersion)
    throw ValidationError("unsupported dump version " + std::to_string(version) + " (expected " + std::to_string(kDumpVersion) + ")");
  const std::uint64_t header_len = detail::get_u32(p + 12);
  if (bytes.size() < 16 + header_len)
    throw TruncationError("dump truncated inside header (" + std::to_string(header_len) + " bytes declared)");

  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("header is not valid JSON: ") + e.what());
  }

  const std::uint64_t payload_start = 16 + header_len;
  const std::uint64_t payload_size = bytes.size() - payload_start;

  struct Entry {
    Eigen::Index rows, cols;
    std::uint64_t offset, length;
  };
  std::map<std::string, Entry> dir;
  AttnDump d;
  try {
    std::uint64_t expected_offset = 0;
    for (const auto& t : h.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<std::vector<std::int64_t>>();
      if (t.at("dtype").get<std::string>() != "f32le") throw ValidationError(name + ": unsupported dtype");
      if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0) throw ShapeError(name + ": shape must be [rows, cols]");
      const Entry e{shape[0], shape[1], t.at("offset").get<std::uint64_t>(), t.at("length").get<std::uint64_t>()};
      if (e.length != static_cast<std::uint64_t>(e.rows * e.cols) * 4)
        throw ShapeError(name + ": declared shape " + std::to_string(e.rows) + "x" + std::to_string(e.cols) +
                         " needs " + std::to_string(e.rows * e.cols * 4) + " bytes, length says " + std::to_string(e.length));
      if (e.offset != expected_offset) throw ShapeError(name + ": offset " + std::to_string(e.offset) + " is not contiguous");
      if (e.offset + e.length > payload_size)
        throw TruncationError("dump truncated in tensor '" + name + "': needs " + std::to_string(e.offset + e.length) +
                              " payload bytes, have " + std::to_string(payload_size));
      expected_offset += e.length;
      if (!dir.emplace(name, e).second) throw ValidationError("duplicate tensor '" + name + "'");
    }
    if (expected_offset != payload_size)
      throw ValidationError(std::to_string(payload_size - expected_offset) + " trailing payload bytes");

    auto load = [&](const std::string& name) {
      const auto it = dir.find(name);
      if (it == dir.end()) throw ValidationError("missing tensor '" + name + "'");
      const auto& e = it->second;
      Matrix m(e.rows, e.cols);
      const unsigned char* src = p + payload_start + e.offset;
      for (Eigen::Index i = 0; i < e.rows; ++i)
        for (Eigen::Index j = 0; j < e.cols; ++j, src += 4) {
          const float v = std::bit_cast<float>(detail::get_u32(src));
          if (!std::isfinite(v)) throw ValidationError(name + ": non-finite entry at (" + std::to_string(i) + "," + std::to_string(j) + ")");
          m(i, j) = v;
        }
      return m;
    };

    d.image_id = h.at("image_id").get<std::string>();
    d.timestep = h.at("timestep").get<int>();
    d.pathway = parse_pathway(h.at("pathway").get<std::string>());
    d.gamma_applied = h.at("gamma_applied").get<double>();
    d.image_size = detail::grid_from(h.at("image_size"), "image_size");
    d.token_meta = token_meta_from_json(h.at("token_meta"));
    const Grid work = detail::grid_from(h.at("working_resolution"), "working_resolution");
    Matrix sa = load("self_attention");
    const auto hw = static_cast<Eigen::Index>(work.size());
    if (sa.rows() != hw || sa.cols() != hw)
      throw ShapeError("self_attention: shape " + std::to_string(sa.rows()) + "x" + std::to_string(sa.cols()) +
                       " does not match working resolution " + to_string(work));
    for (Eigen::Index i = 0; i < hw; ++i) {
      if ((sa.row(i).array() < 0.0).any()) throw ValidationError("self_attention: negative entry in row " + std::to_string(i));
      const double s = sa.row(i).sum();
      if (std::abs(s - 1.0) > kStochasticTolerance)
        throw ValidationError("self_attention: row " + std::to_string(i) + " sums to " + std::to_string(s) + ", not 1");
    }
    d.self_attention = {work, std::move(sa), false};

    const int t = d.token_meta.token_count();
    for (const auto& l : h.at("cross_layers")) {
      CrossQK c;
      c.name = l.at("name").get<std::string>();
      c.grid = detail::grid_from(l.at("resolution"), "cross_layers.resolution");
      c.d = l.at("d").get<double>();
      c.q = load(l.at("q").get<std::string>());
      c.k = load(l.at("k").get<std::string>());
      if (static_cast<std::size_t>(c.q.rows()) != c.grid.size())
        throw ShapeError("cross layer '" + c.name + "': q has " + std::to_string(c.q.rows()) + " rows for resolution " + to_string(c.grid));
      if (c.k.rows() != t)
        throw ShapeError("cross layer '" + c.name + "': k has " + std::to_string(c.k.rows()) + " rows for " + std::to_string(t) + " tokens");
      if (c.q.cols() != c.k.cols()) throw ShapeError("cross layer '" + c.name + "': q/k widths differ");
      if (!(c.d > 0.0)) throw ValidationError("cross layer '" + c.name + "': d must be positive");
      d.cross.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed header: ") + e.what());
  }
  try {
    validate(d.token_meta);
  } catch (const ParameterError& e) {
    throw ValidationError(std::string("token_meta: ") + e.what());
  }
  return d;
}

inline AttnDump read_dump(std::istream& source) {
  std::string bytes((std::istreambuf_iterator<char>(source)), std::istreambuf_iterator<char>());
  if (source.bad()) throw IoError("failed reading attention dump");
  return decode_dump(bytes);
}

/// Distinct cross-attention resolutions present in the dump, in file order.
inline std::vector<Grid> dump_levels(const AttnDump& dump) {
  std::vector<Grid> out;
  for (const auto& c : dump.cross)
    if (std::find(out.begin(), out.end(), c.grid) == out.end()) out.push_back(c.grid);
  return out;
}

/// Recomputes each selected layer's cross-attention from its Q/K (with gamma
/// from `meta` on the offline pathway, gamma 1 when the producer already
/// scaled embeddings), upsamples bilinearly to the working resolution and
/// averages over every layer at the requested levels. An empty `levels`
/// selects all levels in the dump.
inline CrossAttentionStack fuse_cross_attention(const AttnDump& dump, const TokenMeta& meta, const std::vector<Grid>& levels) {
  const auto available = dump_levels(dump);
  const std::vector<Grid> wanted = levels.empty() ? available : levels;
  for (const auto& g : wanted)
    if (std::find(available.begin(), available.end(), g) == available.end())
      throw ConfigError("cross-attention level " + to_string(g) + " not present in dump '" + dump.image_id + "'");
  if (wanted.empty()) throw ConfigError("dump '" + dump.image_id + "' has no cross-attention layers");

  TokenMeta effective = meta;
  if (dump.pathway == Pathway::embedding) effective.gamma = 1.0;

  CrossAttentionStack out;
  out.grid = dump.self_attention.grid;
  out.token_count = meta.token_count();
  out.fused = Matrix::Zero(static_cast<Eigen::Index>(out.grid.size()), meta.token_count());
  for (const auto& c : dump.cross) {
    if (std::find(wanted.begin(), wanted.end(), c.grid) == wanted.end()) continue;
    Matrix a = category_enhanced_attention(c.q, c.k, effective, c.d);
    out.fused += resize_bilinear(a, c.grid, out.grid);
    out.layers.push_back({c.grid, std::move(a)});
  }
  out.fused /= static_cast<double>(out.layers.size());
  return out;
}

}  // namespace iseg

#pragma once

// File formats: grayscale PFM, CSV grids, JSON documents, model checkpoints
// and run manifests.

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "vadepth/error.hpp"
#include "vadepth/grid.hpp"
#include "vadepth/losses_metrics.hpp"
#include "vadepth/toypipe.hpp"
#include "vadepth/varlayer.hpp"

namespace vadepth {

using json = nlohmann::json;

inline constexpr const char* kToolVersion = "0.3.0";

// ---------------------------------------------------------------------------
// Raw file helpers

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read error on " + path.string());
  return ss.str();
}

/// Writes via a sibling temporary file and rename, so readers never observe a
/// partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write error on " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

/// 64-bit FNV-1a content digest, rendered as "fnv1a64:<16 hex digits>".
inline std::string digest(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream ss;
  ss << "fnv1a64:" << std::hex << std::setw(16) << std::setfill('0') << h;
  return ss.str();
}

inline std::string file_digest(const std::filesystem::path& path) { return digest(read_file(path)); }

// ---------------------------------------------------------------------------
// PFM

namespace detail {

inline std::uint32_t byteswap32(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0x0000ff00u) | ((v << 8) & 0x00ff0000u) | (v << 24);
}

}  // namespace detail

/// Parses a grayscale "Pf" map. Rows are stored bottom-up; a negative scale
/// means little-endian samples. NaN samples become invalid pixels.
inline DepthMap parse_pfm(std::string_view bytes) {
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
  };
  auto token = [&] {
    skip_ws();
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw IoError("malformed PFM header: unexpected end of file");
    return std::string(bytes.substr(start, pos - start));
  };
  const std::string magic = token();
  if (magic == "PF") throw IoError("color PFM ('PF') maps are not supported; expected grayscale 'Pf'");
  if (magic != "Pf") throw IoError("malformed PFM header: bad magic '" + magic + "'");
  int width = 0, height = 0;
  double scale = 0.0;
  try {
    std::size_t used = 0;
    const std::string ws = token();
    width = std::stoi(ws, &used);
    if (used != ws.size()) throw std::invalid_argument(ws);
    const std::string hs = token();
    height = std::stoi(hs, &used);
    if (used != hs.size()) throw std::invalid_argument(hs);
    const std::string ss = token();
    scale = std::stod(ss, &used);
    if (used != ss.size()) throw std::invalid_argument(ss);
  } catch (const std::logic_error&) {
    throw IoError("malformed PFM header: bad dimensions or scale");
  }
  if (width < 1 || height < 1) throw IoError("malformed PFM header: non-positive dimensions");
  if (scale == 0.0 || !std::isfinite(scale)) throw IoError("malformed PFM header: scale must be non-zero");
  // Exactly one whitespace byte separates the header from the payload.
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw IoError("malformed PFM header: missing separator before payload");
  ++pos;
  const std::size_t need = static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 4;
  if (bytes.size() - pos < need)
    throw IoError("truncated PFM payload: expected " + std::to_string(need) + " bytes, found " +
                  std::to_string(bytes.size() - pos));
  const bool file_le = scale < 0.0;
  const bool host_le = std::endian::native == std::endian::little;
  DepthMap out(height, width);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      std::uint32_t u = 0;
      std::memcpy(&u, bytes.data() + pos + (static_cast<std::size_t>(r) * width + c) * 4, 4);
      if (file_le != host_le) u = detail::byteswap32(u);
      const float f = std::bit_cast<float>(u);
      const int row = height - 1 - r;
      if (std::isnan(f)) {
        out.values(row, c) = 0.0;
        out.valid(row, c) = 0;
      } else {
        out.values(row, c) = static_cast<double>(f);
      }
    }
  return out;
}

inline DepthMap read_pfm(const std::filesystem::path& path) {
  try {
    return parse_pfm(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

/// Little-endian grayscale PFM; invalid pixels are written as NaN.
inline std::string encode_pfm(const DepthMap& map) {
  std::ostringstream ss;
  ss << "Pf\n" << map.width() << ' ' << map.height() << "\n-1.0\n";
  std::string out = ss.str();
  const std::size_t header = out.size();
  out.resize(header + map.values.size() * 4);
  for (int r = 0; r < map.height(); ++r)
    for (int c = 0; c < map.width(); ++c) {
      const int row = map.height() - 1 - r;
      const float f = map.is_valid(row, c) ? static_cast<float>(map(row, c)) : std::numeric_limits<float>::quiet_NaN();
      std::uint32_t u = std::bit_cast<std::uint32_t>(f);
      if constexpr (std::endian::native != std::endian::little) u = detail::byteswap32(u);
      std::memcpy(out.data() + header + (static_cast<std::size_t>(r) * map.width() + c) * 4, &u, 4);
    }
  return out;
}

inline void write_pfm(const std::filesystem::path& path, const DepthMap& map) {
  write_file_atomic(path, encode_pfm(map));
}

inline void write_pfm(const std::filesystem::path& path, const Field& f) {
  write_pfm(path, DepthMap::all_valid(f));
}

// ---------------------------------------------------------------------------
// CSV grids: one row per line, comma separated, "nan" marks invalid pixels.

inline DepthMap parse_csv_map(std::string_view text) {
  std::vector<std::vector<double>> rows;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string line(text.substr(start, end - start));
    start = end + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<double> row;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      const auto b = cell.find_first_not_of(" \t");
      const auto e = cell.find_last_not_of(" \t");
      if (b == std::string::npos) throw IoError("csv map: empty cell");
      cell = cell.substr(b, e - b + 1);
      char* endp = nullptr;
      const double v = std::strtod(cell.c_str(), &endp);
      if (endp != cell.c_str() + cell.size()) throw IoError("csv map: cannot parse '" + cell + "'");
      row.push_back(v);
    }
    if (!line.empty() && line.back() == ',') throw IoError("csv map: trailing comma");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError("csv map is ragged/empty: no rows");
  const std::size_t w = rows.front().size();
  for (const auto& r : rows)
    if (r.size() != w || w == 0) throw IoError("csv map is ragged/empty: rows differ in length");
  DepthMap out(static_cast<int>(rows.size()), static_cast<int>(w));
  for (int i = 0; i < out.height(); ++i)
    for (int j = 0; j < out.width(); ++j) {
      const double v = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      if (std::isnan(v)) {
        out.valid(i, j) = 0;
        out(i, j) = 0.0;
      } else {
        out(i, j) = v;
      }
    }
  return out;
}

inline DepthMap read_csv_map(const std::filesystem::path& path) {
  try {
    return parse_csv_map(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline std::string encode_csv_map(const DepthMap& map) {
  std::string out;
  char buf[40];
  for (int i = 0; i < map.height(); ++i) {
    for (int j = 0; j < map.width(); ++j) {
      if (j) out += ',';
      if (!map.is_valid(i, j)) {
        out += "nan";
      } else {
        std::snprintf(buf, sizeof buf, "%.17g", map(i, j));
        out += buf;
      }
    }
    out += '\n';
  }
  return out;
}

inline void write_csv_map(const std::filesystem::path& path, const DepthMap& map) {
  write_file_atomic(path, encode_csv_map(map));
}

/// Reads a map by extension: .csv as CSV, anything else as PFM.
inline DepthMap read_map(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? read_csv_map(path) : read_pfm(path);
}

// ---------------------------------------------------------------------------
// JSON views

inline json to_json(const MetricsReport& m) {
  return json{{"silog", m.silog}, {"abs_rel", m.abs_rel}, {"sq_rel", m.sq_rel}, {"rms", m.rms},
              {"rms_log", m.rms_log}, {"d1", m.d1}, {"d2", m.d2}, {"d3", m.d3}, {"n_valid", m.n_valid}};
}

inline json to_json(const SolveDiagnostics& d) {
  return json{{"iterations", d.iterations},
              {"final_residual", d.final_residual},
              {"factorization_reused", d.factorization_reused}};
}

/// "anchor:i,j,value[,weight]" | "mean:value" | "tikhonov:mu"
inline GaugeMode parse_gauge(const std::string& text) {
  const auto colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  const std::string args = colon == std::string::npos ? "" : text.substr(colon + 1);
  std::vector<double> v;
  std::stringstream ss(args);
  std::string item;
  try {
    while (std::getline(ss, item, ',')) {
      std::size_t used = 0;
      v.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    }
  } catch (const std::logic_error&) {
    throw InvalidArgument("bad gauge arguments '" + args + "'");
  }
  if (kind == "anchor") {
    if (v.size() != 3 && v.size() != 4) throw InvalidArgument("anchor gauge expects anchor:i,j,value[,weight]");
    AnchorGauge a{static_cast<int>(v[0]), static_cast<int>(v[1]), v[2], v.size() == 4 ? v[3] : 1.0};
    if (a.row != v[0] || a.col != v[1]) throw InvalidArgument("anchor pixel indices must be integers");
    return a;
  }
  if (kind == "mean") {
    if (v.size() != 1) throw InvalidArgument("mean gauge expects mean:value");
    return MeanGauge{v[0]};
  }
  if (kind == "tikhonov") {
    if (v.size() != 1) throw InvalidArgument("tikhonov gauge expects tikhonov:mu");
    return TikhonovGauge{v[0]};
  }
  throw InvalidArgument("unknown gauge '" + kind + "' (expected anchor, mean or tikhonov)");
}

inline std::string format_gauge(const GaugeMode& g) {
  std::ostringstream ss;
  ss << std::setprecision(17);
  if (const auto* a = std::get_if<AnchorGauge>(&g))
    ss << "anchor:" << a->row << ',' << a->col << ',' << a->value << ',' << a->weight;
  else if (const auto* m = std::get_if<MeanGauge>(&g))
    ss << "mean:" << m->value;
  else
    ss << "tikhonov:" << std::get<TikhonovGauge>(g).mu;
  return ss.str();
}

// ---------------------------------------------------------------------------
// Training configuration (config.json for train-toy)

inline constexpr int kConfigSchemaVersion = 1;

inline json to_json(const TrainConfig& c) {
  const auto& s = c.data.scene;
  return json{{"schema_version", kConfigSchemaVersion},
              {"mode", to_string(c.shape.mode)},
              {"features", c.shape.features},
              {"channels", c.shape.channels},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"lr_max", c.lr_max},
              {"lr_min", c.lr_min},
              {"hflip", c.hflip},
              {"seed", c.seed},
              {"loss", {{"alpha", c.loss.alpha}, {"lambda", c.loss.lambda}, {"pooling_factor", c.loss.pooling_factor},
                        {"seed", c.loss.seed}}},
              {"data", {{"train_scenes", c.data.train_scenes},
                        {"heldout_scenes", c.data.heldout_scenes},
                        {"height", s.height},
                        {"width", s.width},
                        {"planes", s.planes},
                        {"depth_min", s.depth_min},
                        {"depth_max", s.depth_max},
                        {"image_noise", s.image_noise}}}};
}

/// Missing keys keep their defaults; unknown schema versions are rejected.
inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    const int version = j.value("schema_version", -1);
    if (version != kConfigSchemaVersion)
      throw InvalidArgument("config schema_version must be " + std::to_string(kConfigSchemaVersion));
    c.shape.mode = parse_layer_mode(j.value("mode", std::string("v-layer")));
    c.shape.features = j.value("features", c.shape.features);
    c.shape.channels = j.value("channels", c.shape.channels);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr_max = j.value("lr_max", c.lr_max);
    c.lr_min = j.value("lr_min", c.lr_min);
    c.hflip = j.value("hflip", c.hflip);
    c.seed = j.value("seed", c.seed);
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      c.loss.alpha = l.value("alpha", c.loss.alpha);
      c.loss.lambda = l.value("lambda", c.loss.lambda);
      c.loss.pooling_factor = l.value("pooling_factor", c.loss.pooling_factor);
      c.loss.seed = l.value("seed", c.loss.seed);
    }
    if (j.contains("data")) {
      const auto& d = j.at("data");
      auto& s = c.data.scene;
      c.data.train_scenes = d.value("train_scenes", c.data.train_scenes);
      c.data.heldout_scenes = d.value("heldout_scenes", c.data.heldout_scenes);
      s.height = d.value("height", s.height);
      s.width = d.value("width", s.width);
      s.planes = d.value("planes", s.planes);
      s.depth_min = d.value("depth_min", s.depth_min);
      s.depth_max = d.value("depth_max", s.depth_max);
      s.image_noise = d.value("image_noise", s.image_noise);
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("bad training config: ") + e.what());
  }
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoints: "VADCKPT1", u64 little-endian header length, JSON header,
// then the parameters as little-endian float64.

inline constexpr char kCheckpointMagic[9] = "VADCKPT1";

inline std::string encode_checkpoint(const ToyModel& model, const json& config, std::uint64_t seed) {
  json header;
  header["format_version"] = 1;
  header["mode"] = to_string(model.shape.mode);
  header["features"] = model.shape.features;
  header["channels"] = model.shape.channels;
  header["gauge"] = format_gauge(model.solve_cfg.gauge);
  header["seed"] = seed;
  header["config_hash"] = digest(config.dump());
  header["param_count"] = model.params.size();
  json blocks = json::array();
  for (const auto& b : model.blocks) blocks.push_back({{"name", b.name}, {"offset", b.offset}, {"size", b.size}});
  header["blocks"] = blocks;
  const std::string h = header.dump();

  std::string out(kCheckpointMagic, 8);
  std::uint64_t len = h.size();
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((len >> (8 * k)) & 0xff));
  out += h;
  for (double p : model.params) {
    const auto u = std::bit_cast<std::uint64_t>(p);
    for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((u >> (8 * k)) & 0xff));
  }
  return out;
}

struct Checkpoint {
  ToyModel model;
  json header;
};

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 8) != std::string_view(kCheckpointMagic, 8))
    throw IoError("not a checkpoint: bad magic");
  std::uint64_t len = 0;
  for (int k = 0; k < 8; ++k) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + k])) << (8 * k);
  if (bytes.size() - 16 < len) throw IoError("truncated checkpoint header");
  Checkpoint ck;
  try {
    ck.header = json::parse(bytes.substr(16, len));
    if (ck.header.at("format_version").get<int>() != 1) throw IoError("unsupported checkpoint version");
    ToyShape shape;
    shape.mode = parse_layer_mode(ck.header.at("mode").get<std::string>());
    shape.features = ck.header.at("features").get<int>();
    shape.channels = ck.header.at("channels").get<int>();
    ck.model = ToyModel(shape);
    ck.model.solve_cfg.gauge = parse_gauge(ck.header.at("gauge").get<std::string>());
    if (ck.header.at("param_count").get<std::size_t>() != ck.model.params.size())
      throw IoError("checkpoint parameter count mismatch");
  } catch (const json::exception& e) {
    throw IoError(std::string("bad checkpoint header: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw IoError(std::string("bad checkpoint header: ") + e.what());
  }
  const std::size_t n = ck.model.params.size();
  const std::size_t base = 16 + len;
  if (bytes.size() != base + 8 * n) throw IoError("truncated checkpoint payload");
  for (std::size_t p = 0; p < n; ++p) {
    std::uint64_t u = 0;
    for (int k = 0; k < 8; ++k)
      u |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[base + 8 * p + k])) << (8 * k);
    ck.model.params[p] = std::bit_cast<double>(u);
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Run manifests

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;  ///< full argument vector after the program name
  json config;
  json seeds = json::object();
  std::map<std::string, std::string> input_digests;
  std::map<std::string, std::string> output_digests;
  std::string tool_version = kToolVersion;
  json timings = json::object();
};

inline json to_json(const RunManifest& m) {
  return json{{"command", m.command},   {"argv", m.argv},
              {"config", m.config},     {"seeds", m.seeds},
              {"input_digests", m.input_digests}, {"output_digests", m.output_digests},
              {"tool_version", m.tool_version},   {"timings", m.timings}};
}

inline RunManifest manifest_from_json(const json& j) {
  RunManifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.argv = j.at("argv").get<std::vector<std::string>>();
    m.config = j.value("config", json::object());
    m.seeds = j.value("seeds", json::object());
    m.input_digests = j.value("input_digests", std::map<std::string, std::string>{});
    m.output_digests = j.value("output_digests", std::map<std::string, std::string>{});
    m.tool_version = j.value("tool_version", std::string{});
    m.timings = j.value("timings", json::object());
  } catch (const json::exception& e) {
    throw IoError(std::string("bad manifest: ") + e.what());
  }
  return m;
}

}  // namespace vadepth

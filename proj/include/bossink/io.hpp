#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "bossink/analysis.hpp"
#include "bossink/error.hpp"
#include "bossink/eval.hpp"
#include "bossink/metrics.hpp"
#include "bossink/model.hpp"
#include "bossink/pruning.hpp"

namespace bossink {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Checkpoint container: {path}.json manifest + {path}.bin little-endian f32.

inline constexpr int kFormatVersion = 1;

inline json config_to_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers},     {"d_model", c.d_model},
              {"n_heads", c.n_heads},       {"n_kv_heads", c.n_kv_heads},
              {"d_head", c.d_head},         {"d_ff", c.d_ff},
              {"vocab_size", c.vocab_size}, {"rope_theta", c.rope_theta},
              {"norm_eps", c.norm_eps},     {"max_seq_len", c.max_seq_len}};
}

inline ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  auto count = [&](const char* key) {
    if (!j.contains(key) || !j.at(key).is_number_unsigned()) {
      throw MalformedManifestError(std::string("manifest config: '") + key +
                                   "' missing or not a non-negative integer");
    }
    return j.at(key).get<std::size_t>();
  };
  auto real = [&](const char* key) {
    if (!j.contains(key) || !j.at(key).is_number()) {
      throw MalformedManifestError(std::string("manifest config: '") + key + "' missing or not a number");
    }
    return j.at(key).get<double>();
  };
  c.n_layers = count("n_layers");
  c.d_model = count("d_model");
  c.n_heads = count("n_heads");
  c.n_kv_heads = count("n_kv_heads");
  c.d_head = count("d_head");
  c.d_ff = count("d_ff");
  c.vocab_size = count("vocab_size");
  c.max_seq_len = count("max_seq_len");
  c.rope_theta = real("rope_theta");
  c.norm_eps = static_cast<float>(real("norm_eps"));
  return c;
}

namespace detail {

inline void to_little_endian(std::vector<float>& v) {
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& f : v) {
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      u = (u >> 24) | ((u >> 8) & 0xff00u) | ((u << 8) & 0xff0000u) | (u << 24);
      std::memcpy(&f, &u, 4);
    }
  }
}

// (name, tensor) pairs in manifest order.
template <typename Ck, typename Fn>
void for_each_named_tensor(Ck& ck, Fn&& fn) {
  fn(std::string("embedding"), ck.embedding);
  for (std::size_t i = 0; i < ck.blocks.size(); ++i) {
    BlockWeights::for_each(ck.blocks[i], [&](const char* suffix, auto& t) {
      fn("blocks." + std::to_string(i) + "." + suffix, t);
    });
  }
  fn(std::string("final_norm"), ck.final_norm);
  fn(std::string("lm_head"), ck.lm_head);
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("failed reading '" + path + "'");
  return ss.str();
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  ck.validate();
  json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["config"] = config_to_json(ck.config);
  manifest["tensors"] = json::array();
  manifest["provenance"] = ck.provenance;
  std::string bin;
  detail::for_each_named_tensor(ck, [&](const std::string& name, const Tensor& t) {
    std::vector<float> le = t.values();
    detail::to_little_endian(le);
    const std::size_t offset = bin.size();
    bin.append(reinterpret_cast<const char*>(le.data()), le.size() * sizeof(float));
    manifest["tensors"].push_back({{"name", name},
                                   {"dtype", "f32"},
                                   {"shape", t.shape()},
                                   {"byte_offset", offset},
                                   {"byte_length", le.size() * sizeof(float)}});
  });
  detail::write_file(path + ".bin", bin);
  detail::write_file(path + ".json", manifest.dump(2) + "\n");
}

// Validates every manifest invariant and the weight data before returning.
inline Checkpoint load_checkpoint(const std::string& path) {
  const std::string manifest_path = path + ".json";
  const std::string bin_path = path + ".bin";
  if (!std::filesystem::exists(manifest_path)) {
    throw IoError("checkpoint manifest '" + manifest_path + "' not found");
  }
  if (!std::filesystem::exists(bin_path)) {
    throw IoError("checkpoint data '" + bin_path + "' not found");
  }
  json m;
  try {
    m = json::parse(detail::read_file(manifest_path));
  } catch (const json::exception& e) {
    throw MalformedManifestError("'" + manifest_path + "': " + e.what());
  }
  const std::string bin = detail::read_file(bin_path);
  auto bad = [&](const std::string& msg) {
    throw MalformedManifestError("'" + manifest_path + "': " + msg);
  };
  try {
    if (!m.is_object() || m.value("format_version", 0) != kFormatVersion) {
      bad("unsupported or missing format_version");
    }
    if (!m.contains("config") || !m.contains("tensors") || !m["tensors"].is_array()) {
      bad("missing config or tensors");
    }
    Checkpoint ck;
    ck.config = config_from_json(m["config"]);
    ck.config.validate();
    ck.blocks.assign(ck.config.n_layers, BlockWeights{});

    std::map<std::string, Tensor*> slots;
    detail::for_each_named_tensor(ck, [&](const std::string& name, Tensor& t) { slots[name] = &t; });

    std::set<std::string> seen;
    std::size_t expected_offset = 0;
    for (const auto& entry : m["tensors"]) {
      const std::string name = entry.at("name").get<std::string>();
      if (entry.at("dtype").get<std::string>() != "f32") bad("tensor '" + name + "' is not f32");
      const Shape shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("byte_offset").get<std::size_t>();
      const auto length = entry.at("byte_length").get<std::size_t>();
      if (length != 4 * shape_numel(shape)) {
        bad("tensor '" + name + "' byte_length " + std::to_string(length) + " != 4 x " +
            std::to_string(shape_numel(shape)));
      }
      if (offset != expected_offset) {
        bad("tensor '" + name + "' at offset " + std::to_string(offset) + ", expected " +
            std::to_string(expected_offset));
      }
      expected_offset += length;
      if (expected_offset > bin.size()) bad("tensor '" + name + "' runs past the end of the data file");
      auto slot = slots.find(name);
      if (slot == slots.end()) bad("unexpected tensor '" + name + "'");
      if (!seen.insert(name).second) bad("tensor '" + name + "' listed twice");
      std::vector<float> data(shape_numel(shape));
      std::memcpy(data.data(), bin.data() + offset, length);
      detail::to_little_endian(data);
      *slot->second = Tensor(shape, std::move(data));
    }
    if (expected_offset != bin.size()) {
      bad("data file has " + std::to_string(bin.size()) + " bytes, manifest covers " +
          std::to_string(expected_offset));
    }
    for (const auto& [name, _] : slots) {
      if (!seen.count(name)) {
        throw IncompleteCheckpointError("'" + manifest_path + "': tensor '" + name +
                                        "' required by the config is missing");
      }
    }
    if (m.contains("provenance")) ck.provenance = m["provenance"].get<std::vector<std::string>>();
    try {
      ck.validate();
    } catch (const DimensionError& e) {
      bad(e.what());
    }
    return ck;
  } catch (const json::exception& e) {
    bad(e.what());
  }
  return {};
}

// ---------------------------------------------------------------------------
// Reports

using Cell = std::variant<std::int64_t, double, std::string>;

// Homogeneous table: every row has one cell per column.
struct Report {
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;
};

// Resolved run settings written ahead of the rows.
using ReportHeader = std::vector<std::pair<std::string, std::string>>;

enum class ReportFormat { csv, json };

inline ReportFormat report_format_from_string(const std::string& s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  throw ConfigError("unknown report format '" + s + "' (expected csv or json)");
}

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

inline std::string cell_text(const Cell& c) {
  if (const auto* i = std::get_if<std::int64_t>(&c)) return std::to_string(*i);
  if (const auto* d = std::get_if<double>(&c)) return format_double(*d);
  return std::get<std::string>(c);
}

inline void check_report(const Report& r) {
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    if (r.rows[i].size() != r.columns.size()) {
      throw InputError("report row " + std::to_string(i) + " has " +
                       std::to_string(r.rows[i].size()) + " cells for " +
                       std::to_string(r.columns.size()) + " columns");
    }
  }
}

// CSV with a header row and RFC-4180 quoting. Header entries become leading
// "# key=value" comment lines.
inline std::string render_csv(const Report& r, const ReportHeader& header = {}) {
  check_report(r);
  std::string out;
  for (const auto& [k, v] : header) out += "# " + k + "=" + v + "\n";
  for (std::size_t i = 0; i < r.columns.size(); ++i) {
    out += (i ? "," : "") + csv_escape(r.columns[i]);
  }
  out += "\n";
  for (const auto& row : r.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + csv_escape(cell_text(row[i]));
    out += "\n";
  }
  return out;
}

inline json cell_json(const Cell& c) {
  if (const auto* i = std::get_if<std::int64_t>(&c)) return *i;
  if (const auto* d = std::get_if<double>(&c)) {
    if (!std::isfinite(*d)) return format_double(*d);
    return *d;
  }
  return std::get<std::string>(c);
}

// Array of objects; with a header the array moves under "rows" next to a
// "run_config" object.
inline std::string render_json(const Report& r, const ReportHeader& header = {}) {
  check_report(r);
  json rows = json::array();
  for (const auto& row : r.rows) {
    json obj = json::object();
    for (std::size_t i = 0; i < row.size(); ++i) obj[r.columns[i]] = cell_json(row[i]);
    rows.push_back(std::move(obj));
  }
  if (header.empty()) return rows.dump(2) + "\n";
  json cfg = json::object();
  for (const auto& [k, v] : header) cfg[k] = v;
  return json{{"run_config", cfg}, {"rows", rows}}.dump(2) + "\n";
}

inline void write_report(const Report& r, ReportFormat format, const std::string& path,
                         const ReportHeader& header = {}) {
  detail::write_file(path, format == ReportFormat::csv ? render_csv(r, header) : render_json(r, header));
}

// Report read back as text cells.
struct ParsedReport {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
  ReportHeader header;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i) {
      if (columns[i] == name) return i;
    }
    throw InputError("report has no column '" + name + "'");
  }
};

namespace detail {

inline std::vector<std::vector<std::string>> parse_csv_records(const std::string& text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> rec;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
      continue;
    }
    if (ch == '"') {
      quoted = true;
      any = true;
    } else if (ch == ',') {
      rec.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (ch == '\n' || ch == '\r') {
      if (ch == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        rec.push_back(std::move(field));
        records.push_back(std::move(rec));
      }
      rec.clear();
      field.clear();
      any = false;
    } else {
      field += ch;
      any = true;
    }
  }
  if (quoted) throw InputError("csv: unterminated quoted field");
  if (any || !field.empty()) {
    rec.push_back(std::move(field));
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace detail

inline ParsedReport parse_csv_report(const std::string& text) {
  ParsedReport out;
  std::string body;
  std::istringstream lines(text);
  std::string line;
  bool in_header = true;
  while (std::getline(lines, line)) {
    if (in_header && line.rfind("# ", 0) == 0) {
      const auto eq = line.find('=');
      if (eq != std::string::npos) out.header.emplace_back(line.substr(2, eq - 2), line.substr(eq + 1));
      continue;
    }
    in_header = false;
    body += line + "\n";
  }
  auto records = detail::parse_csv_records(body);
  if (records.empty()) throw InputError("csv report has no header row");
  out.columns = std::move(records.front());
  for (std::size_t i = 1; i < records.size(); ++i) {
    if (records[i].size() != out.columns.size()) {
      throw InputError("csv row " + std::to_string(i) + " has " + std::to_string(records[i].size()) +
                       " fields for " + std::to_string(out.columns.size()) + " columns");
    }
    out.rows.push_back(std::move(records[i]));
  }
  return out;
}

inline ParsedReport parse_json_report(const std::string& text) {
  ParsedReport out;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw InputError(std::string("json report: ") + e.what());
  }
  if (j.is_object()) {
    if (j.contains("run_config")) {
      for (const auto& [k, v] : j["run_config"].items()) out.header.emplace_back(k, v.get<std::string>());
    }
    j = j.value("rows", json::array());
  }
  if (!j.is_array()) throw InputError("json report: expected an array of rows");
  for (const auto& obj : j) {
    if (out.columns.empty()) {
      for (const auto& [k, _] : obj.items()) out.columns.push_back(k);
    }
    std::vector<std::string> row;
    for (const auto& c : out.columns) {
      const auto& v = obj.at(c);
      if (v.is_string()) {
        row.push_back(v.get<std::string>());
      } else if (v.is_number_integer()) {
        row.push_back(std::to_string(v.get<std::int64_t>()));
      } else {
        row.push_back(format_double(v.get<double>()));
      }
    }
    out.rows.push_back(std::move(row));
  }
  return out;
}

inline ParsedReport read_report(const std::string& path) {
  const std::string text = detail::read_file(path);
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && (text[first] == '[' || text[first] == '{')) {
    return parse_json_report(text);
  }
  return parse_csv_report(text);
}

// ---------------------------------------------------------------------------
// Report schemas

inline std::string join_lengths(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ";" : "") + std::to_string(v[i]);
  return s;
}

inline std::int64_t as_cell(std::size_t v) { return static_cast<std::int64_t>(v); }

inline std::int64_t opt_cell(const std::optional<std::size_t>& v) {
  return v ? static_cast<std::int64_t>(*v) : -1;
}

// Layer-granularity tables write head = -1.
inline Report score_table_report(const ScoreTable& t) {
  Report r{{"layer", "head", "score", "metric", "n_samples", "seq_lens"}, {}};
  for (const auto& e : t.entries) {
    r.rows.push_back({as_cell(e.layer), opt_cell(e.head), e.score, t.metric, as_cell(t.n_samples),
                      join_lengths(t.seq_lens)});
  }
  return r;
}

inline ScoreTable score_table_from_report(const ParsedReport& p) {
  ScoreTable t;
  const auto cl = p.column("layer"), ch = p.column("head"), cs = p.column("score"),
             cm = p.column("metric");
  std::optional<std::size_t> cn, cq;
  for (std::size_t i = 0; i < p.columns.size(); ++i) {
    if (p.columns[i] == "n_samples") cn = i;
    if (p.columns[i] == "seq_lens") cq = i;
  }
  bool layer_table = false;
  for (std::size_t i = 0; i < p.rows.size(); ++i) {
    const auto& row = p.rows[i];
    try {
      const long layer = std::stol(row[cl]);
      const long head = std::stol(row[ch]);
      if (layer < 0) throw InputError("negative layer");
      if (i == 0) {
        t.metric = row[cm];
        layer_table = head < 0;
        if (cn) t.n_samples = std::stoul(row[*cn]);
        if (cq) {
          std::stringstream ss(row[*cq]);
          std::string part;
          while (std::getline(ss, part, ';')) {
            if (!part.empty()) t.seq_lens.push_back(std::stoul(part));
          }
        }
      } else if (row[cm] != t.metric || layer_table != (head < 0)) {
        throw InputError("mixed metrics or granularities");
      }
      ScoreEntry e;
      e.layer = static_cast<std::size_t>(layer);
      if (head >= 0) e.head = static_cast<std::size_t>(head);
      e.score = std::stod(row[cs]);
      t.n_layers = std::max(t.n_layers, e.layer + 1);
      if (e.head) t.n_heads = std::max(t.n_heads, *e.head + 1);
      t.entries.push_back(e);
    } catch (const InputError& e) {
      throw InputError("score report row " + std::to_string(i) + ": " + e.what());
    } catch (const std::exception&) {
      throw InputError("score report row " + std::to_string(i) + ": unparsable number");
    }
  }
  t.granularity = layer_table ? Granularity::layer : Granularity::head;
  return t;
}

inline Report sweep_report(const SweepResult& s) {
  Report r{{"target_layer", "target_head", "score", "delta"}, {}};
  for (const auto& row : s.rows) {
    r.rows.push_back({opt_cell(row.layer), opt_cell(row.head), row.score, row.metric_delta});
  }
  return r;
}

inline Report layer_trend_report(const SweepResult& s) {
  Report r{{"layer", "mean_delta"}, {}};
  for (const auto& [l, d] : s.layer_mean_delta) r.rows.push_back({as_cell(l), d});
  return r;
}

inline Report length_series_report(const std::map<HeadId, LengthSeries>& series) {
  Report r{{"layer", "head", "T", "score", "mu", "sigma", "cv", "slope", "intercept"}, {}};
  for (const auto& [id, s] : series) {
    for (const auto& p : s.points) {
      r.rows.push_back({as_cell(id.first), as_cell(id.second), as_cell(p.seq_len), p.score, s.mu,
                        s.sigma, s.cv ? Cell{*s.cv} : Cell{std::string()}, s.slope, s.intercept});
    }
  }
  return r;
}

inline Report cohort_report(const std::vector<CohortFit>& cohorts) {
  Report r{{"cohort", "min_mu", "n_heads", "slope", "intercept", "mean_cv"}, {}};
  for (const auto& c : cohorts) {
    const Cell slope = c.fit ? Cell{c.fit->slope} : Cell{std::string()};
    const Cell icpt = c.fit ? Cell{c.fit->intercept} : Cell{std::string()};
    const Cell min_mu = std::isfinite(c.min_mu) ? Cell{c.min_mu} : Cell{std::string()};
    r.rows.push_back({c.name, min_mu, as_cell(c.n_heads), slope, icpt, c.mean_cv});
  }
  return r;
}

inline Report eval_report(const std::vector<EvalReport>& reports) {
  Report r{{"strategy", "ratio", "perplexity", "choice_accuracy", "n_removed", "seq_len",
            "n_eval_tokens"},
           {}};
  for (const auto& e : reports) {
    r.rows.push_back({e.strategy, e.prune_ratio, e.perplexity, e.choice_accuracy,
                      as_cell(e.n_removed), as_cell(e.seq_len), as_cell(e.n_eval_tokens)});
  }
  return r;
}

inline Report pattern_report(const std::map<HeadId, PatternLabel>& labels) {
  Report r{{"layer", "head", "label", "s_bos", "diag_mass", "entropy_ratio"}, {}};
  for (const auto& [id, l] : labels) {
    r.rows.push_back({as_cell(id.first), as_cell(id.second), to_string(l.kind), l.diagnostics.s_bos,
                      l.diagnostics.diag_mass, l.diagnostics.entropy_ratio});
  }
  return r;
}

// ---------------------------------------------------------------------------
// PruneSpec record

inline json prune_spec_to_json(const PruneSpec& s) {
  json targets = json::array();
  for (const auto& t : s.targets) {
    if (t.head) {
      targets.push_back({{"layer", t.layer}, {"head", *t.head}});
    } else {
      targets.push_back({{"layer", t.layer}});
    }
  }
  return json{{"granularity", to_string(s.granularity)},
              {"strategy", to_string(s.strategy)},
              {"ratio", s.ratio},
              {"n_layers", s.n_layers},
              {"n_heads", s.n_heads},
              {"protected_layers", s.protected_layers},
              {"heads_protected", s.heads_protected},
              {"ordered_targets", targets}};
}

inline PruneSpec prune_spec_from_json(const json& j) {
  try {
    PruneSpec s;
    s.strategy = strategy_from_string(j.at("strategy").get<std::string>());
    const auto g = j.at("granularity").get<std::string>();
    if (g != "head" && g != "layer") throw InputError("bad granularity '" + g + "'");
    s.granularity = g == "head" ? Granularity::head : Granularity::layer;
    s.ratio = j.at("ratio").get<double>();
    s.n_layers = j.at("n_layers").get<std::size_t>();
    s.n_heads = j.at("n_heads").get<std::size_t>();
    s.protected_layers = j.at("protected_layers").get<std::set<std::size_t>>();
    s.heads_protected = j.at("heads_protected").get<bool>();
    for (const auto& t : j.at("ordered_targets")) {
      PruneTarget pt;
      pt.layer = t.at("layer").get<std::size_t>();
      if (t.contains("head")) pt.head = t.at("head").get<std::size_t>();
      s.targets.push_back(pt);
    }
    return s;
  } catch (const json::exception& e) {
    throw InputError(std::string("prune spec: ") + e.what());
  }
}

inline void save_prune_spec(const PruneSpec& s, const std::string& path) {
  detail::write_file(path, prune_spec_to_json(s).dump(2) + "\n");
}

inline PruneSpec load_prune_spec(const std::string& path) {
  try {
    return prune_spec_from_json(json::parse(detail::read_file(path)));
  } catch (const json::exception& e) {
    throw InputError("prune spec '" + path + "': " + e.what());
  }
}

}  // namespace bossink

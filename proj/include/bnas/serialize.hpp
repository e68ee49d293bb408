#pragma once

// File formats: genotype JSON, flat run-config JSON, run manifests, and the
// trajectory/metrics/plot CSVs. All writes go through a temp-then-rename so
// readers never see partial files. Numbers render via %.9g, which
// round-trips float exactly and keeps reruns byte-identical.

#include <cinttypes>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "bnas/evaluate.hpp"
#include "bnas/search.hpp"

namespace bnas {

using nlohmann::json;

inline constexpr int kGenotypeFormatVersion = 1;
inline constexpr int kManifestFormatVersion = 1;

inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string fmt_hex64(uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

inline void atomic_write_text(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error(tmp + ": cannot open for writing");
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw std::runtime_error(tmp + ": write failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error(path + ": rename from temp failed");
}

inline std::string iso_timestamp_utc() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---- genotype ----

inline json genotype_to_json(const Genotype& g) {
  auto cell = [](const CellTopology& t) {
    json edges = json::array();
    for (const CellEdge& e : t.edges) edges.push_back(json::array({e.target, e.source, op_name(e.op)}));
    return edges;
  };
  json j;
  j["format_version"] = kGenotypeFormatVersion;
  j["n_in"] = g.n_in;
  j["conv_cell"] = cell(g.conv_cell);
  j["enh_cell"] = cell(g.enh_cell);
  if (!g.embedding_channels.empty()) {
    json stages = json::array();
    for (const EmbeddingChoice& c : g.embedding_channels)
      stages.push_back(json{{"deep_to_out", c.deep_to_out},
                            {"broad_to_out", c.broad_to_out},
                            {"deep_to_enh", c.deep_to_enh},
                            {"broad_to_enh", c.broad_to_enh}});
    j["embedding_channels"] = stages;
  }
  return j;
}

namespace detail {

inline int expect_int(const json& v, const std::string& where) {
  if (!v.is_number_integer()) throw config_error(where + ": expected an integer, got " + v.dump());
  return v.get<int>();
}

inline std::vector<CellEdge> parse_cell_edges(const json& v, const std::string& where) {
  if (!v.is_array()) throw config_error(where + ": expected an array of [target, source, op_name] triples");
  std::vector<CellEdge> edges;
  for (const json& e : v) {
    if (!e.is_array() || e.size() != 3 || !e[2].is_string())
      throw config_error(where + ": each edge must be [target, source, op_name], got " + e.dump());
    CellEdge ce;
    ce.target = expect_int(e[0], where + " target");
    ce.source = expect_int(e[1], where + " source");
    ce.op = op_from_name(e[2].get<std::string>());
    edges.push_back(ce);
  }
  return edges;
}

}  // namespace detail

// Accepts the exact writer schema; a missing embedding_channels field means
// the hand-crafted quarter-rule widths apply at build time.
inline Genotype genotype_from_json(const json& j) {
  if (!j.is_object()) throw config_error("genotype: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (key != "format_version" && key != "n_in" && key != "conv_cell" && key != "enh_cell" &&
        key != "embedding_channels")
      throw config_error("genotype: unknown key \"" + key + "\"");
  }
  if (!j.contains("format_version")) throw config_error("genotype: missing format_version");
  if (const int v = detail::expect_int(j.at("format_version"), "genotype format_version");
      v != kGenotypeFormatVersion)
    throw config_error("genotype: unsupported format_version " + std::to_string(v));
  if (!j.contains("n_in") || !j.contains("conv_cell") || !j.contains("enh_cell"))
    throw config_error("genotype: missing n_in, conv_cell or enh_cell");

  Genotype g;
  g.n_in = detail::expect_int(j.at("n_in"), "genotype n_in");
  g.conv_cell = CellTopology{g.n_in, detail::parse_cell_edges(j.at("conv_cell"), "conv_cell")};
  g.enh_cell = CellTopology{g.n_in, detail::parse_cell_edges(j.at("enh_cell"), "enh_cell")};
  if (j.contains("embedding_channels")) {
    const json& stages = j.at("embedding_channels");
    if (!stages.is_array()) throw config_error("embedding_channels: expected an array of per-stage objects");
    for (size_t i = 0; i < stages.size(); ++i) {
      const json& s = stages[i];
      const std::string where = "embedding_channels[" + std::to_string(i) + "]";
      if (!s.is_object()) throw config_error(where + ": expected an object");
      for (const auto& [key, value] : s.items()) {
        (void)value;
        if (key != "deep_to_out" && key != "broad_to_out" && key != "deep_to_enh" && key != "broad_to_enh")
          throw config_error(where + ": unknown key \"" + key + "\"");
      }
      EmbeddingChoice c;
      auto field = [&](const char* name) {
        if (!s.contains(name)) throw config_error(where + ": missing " + name);
        const int w = detail::expect_int(s.at(name), where + " " + name);
        if (w < 1) throw config_error(where + ": " + name + " must be >= 1");
        return w;
      };
      c.deep_to_out = field("deep_to_out");
      c.broad_to_out = field("broad_to_out");
      c.deep_to_enh = field("deep_to_enh");
      c.broad_to_enh = field("broad_to_enh");
      g.embedding_channels.push_back(c);
    }
  }
  g.validate();
  return g;
}

inline void save_genotype(const Genotype& g, const std::string& path) {
  g.validate();
  atomic_write_text(path, genotype_to_json(g).dump(2) + "\n");
}

inline Genotype load_genotype(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw config_error(path + ": cannot open");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw config_error(path + ": " + e.what());
  }
  try {
    return genotype_from_json(j);
  } catch (const config_error& e) {
    throw config_error(path + ": " + e.what());
  }
}

// ---- run config ----

struct DatasetSource {
  std::string kind = "synthetic";  // or "idx"
  SynthSpec synth = SynthSpec::separable();
  std::string images_path, labels_path;
  std::string test_images_path, test_labels_path;
};

struct RunConfig {
  SearchConfig search;
  EvalConfig eval;
  DatasetSource data;
};

namespace detail {

inline float expect_float(const json& v, const std::string& where) {
  if (!v.is_number()) throw config_error(where + ": expected a number, got " + v.dump());
  return v.get<float>();
}

inline bool expect_bool(const json& v, const std::string& where) {
  if (!v.is_boolean()) throw config_error(where + ": expected a boolean, got " + v.dump());
  return v.get<bool>();
}

inline std::string expect_string(const json& v, const std::string& where) {
  if (!v.is_string()) throw config_error(where + ": expected a string, got " + v.dump());
  return v.get<std::string>();
}

}  // namespace detail

// Flat key/value document; every key maps onto one config field and unknown
// keys are errors. num_classes, in_channels and input_size are not keys:
// they derive from the dataset when the CLI materializes it.
inline RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw config_error("config: expected a JSON object");
  RunConfig cfg;
  using detail::expect_bool;
  using detail::expect_float;
  using detail::expect_int;
  using detail::expect_string;
  for (const auto& [key, v] : j.items()) {
    const std::string where = "config key \"" + key + "\"";
    if (key == "u") cfg.search.net.u = expect_int(v, where);
    else if (key == "k") cfg.search.net.k = expect_int(v, where);
    else if (key == "c") cfg.search.net.c = expect_int(v, where);
    else if (key == "n_in") cfg.search.net.n_in = expect_int(v, where);
    else if (key == "stem_stride") cfg.search.net.stem_stride = expect_int(v, where);
    else if (key == "max_epochs") cfg.search.max_epochs = expect_int(v, where);
    else if (key == "batch_size") cfg.search.batch_size = expect_int(v, where);
    else if (key == "network_lr") cfg.search.network_lr = expect_float(v, where);
    else if (key == "lr_floor") cfg.search.lr_floor = expect_float(v, where);
    else if (key == "momentum") cfg.search.momentum = expect_float(v, where);
    else if (key == "weight_decay") cfg.search.weight_decay = expect_float(v, where);
    else if (key == "arch_lr") cfg.search.arch_lr = expect_float(v, where);
    else if (key == "arch_weight_decay") cfg.search.arch_weight_decay = expect_float(v, where);
    else if (key == "virtual_step") cfg.search.virtual_step = expect_float(v, where);
    else if (key == "stop_patience") cfg.search.stop_patience = expect_int(v, where);
    else if (key == "kes") cfg.search.kes = expect_bool(v, where);
    else if (key == "partial_k") cfg.search.partial_k = expect_int(v, where);
    else if (key == "seed") cfg.search.seed = static_cast<uint32_t>(expect_int(v, where));
    else if (key == "eval_epochs") cfg.eval.epochs = expect_int(v, where);
    else if (key == "eval_batch_size") cfg.eval.batch_size = expect_int(v, where);
    else if (key == "eval_lr") cfg.eval.lr = expect_float(v, where);
    else if (key == "eval_lr_floor") cfg.eval.lr_floor = expect_float(v, where);
    else if (key == "eval_momentum") cfg.eval.momentum = expect_float(v, where);
    else if (key == "eval_weight_decay") cfg.eval.weight_decay = expect_float(v, where);
    else if (key == "data_kind") cfg.data.kind = expect_string(v, where);
    else if (key == "data_classes") cfg.data.synth.classes = expect_int(v, where);
    else if (key == "data_per_class") cfg.data.synth.per_class = expect_int(v, where);
    else if (key == "data_image_size") cfg.data.synth.image_size = expect_int(v, where);
    else if (key == "data_contrast") cfg.data.synth.contrast = expect_float(v, where);
    else if (key == "data_noise") cfg.data.synth.noise = expect_float(v, where);
    else if (key == "data_images") cfg.data.images_path = expect_string(v, where);
    else if (key == "data_labels") cfg.data.labels_path = expect_string(v, where);
    else if (key == "data_test_images") cfg.data.test_images_path = expect_string(v, where);
    else if (key == "data_test_labels") cfg.data.test_labels_path = expect_string(v, where);
    else throw config_error("config: unknown key \"" + key + "\"");
  }
  if (cfg.data.kind != "synthetic" && cfg.data.kind != "idx")
    throw config_error("config: data_kind must be \"synthetic\" or \"idx\", got \"" + cfg.data.kind + "\"");
  cfg.eval.seed = cfg.search.seed;
  return cfg;
}

inline json run_config_to_json(const RunConfig& cfg) {
  json j;
  j["u"] = cfg.search.net.u;
  j["k"] = cfg.search.net.k;
  j["c"] = cfg.search.net.c;
  j["n_in"] = cfg.search.net.n_in;
  j["stem_stride"] = cfg.search.net.stem_stride;
  j["max_epochs"] = cfg.search.max_epochs;
  j["batch_size"] = cfg.search.batch_size;
  j["network_lr"] = cfg.search.network_lr;
  j["lr_floor"] = cfg.search.lr_floor;
  j["momentum"] = cfg.search.momentum;
  j["weight_decay"] = cfg.search.weight_decay;
  j["arch_lr"] = cfg.search.arch_lr;
  j["arch_weight_decay"] = cfg.search.arch_weight_decay;
  j["virtual_step"] = cfg.search.virtual_step;
  j["stop_patience"] = cfg.search.stop_patience;
  j["kes"] = cfg.search.kes;
  j["partial_k"] = cfg.search.partial_k;
  j["seed"] = static_cast<int64_t>(cfg.search.seed);
  j["eval_epochs"] = cfg.eval.epochs;
  j["eval_batch_size"] = cfg.eval.batch_size;
  j["eval_lr"] = cfg.eval.lr;
  j["eval_lr_floor"] = cfg.eval.lr_floor;
  j["eval_momentum"] = cfg.eval.momentum;
  j["eval_weight_decay"] = cfg.eval.weight_decay;
  j["data_kind"] = cfg.data.kind;
  if (cfg.data.kind == "synthetic") {
    j["data_classes"] = cfg.data.synth.classes;
    j["data_per_class"] = cfg.data.synth.per_class;
    j["data_image_size"] = cfg.data.synth.image_size;
    j["data_contrast"] = cfg.data.synth.contrast;
    j["data_noise"] = cfg.data.synth.noise;
  } else {
    j["data_images"] = cfg.data.images_path;
    j["data_labels"] = cfg.data.labels_path;
    j["data_test_images"] = cfg.data.test_images_path;
    j["data_test_labels"] = cfg.data.test_labels_path;
  }
  return j;
}

// Reads either a plain config document or a manifest wrapping one under its
// "config" key, so a finished run's manifest is directly rerunnable.
inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw config_error(path + ": cannot open");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw config_error(path + ": " + e.what());
  }
  try {
    if (j.is_object() && j.contains("config")) return run_config_from_json(j.at("config"));
    return run_config_from_json(j);
  } catch (const config_error& e) {
    throw config_error(path + ": " + e.what());
  }
}

inline void write_manifest(const std::string& path, const RunConfig& cfg, const std::string& command,
                           const std::map<std::string, std::string>& outputs, const std::string& started,
                           const std::string& finished) {
  json j;
  j["format_version"] = kManifestFormatVersion;
  j["tool_version"] = kVersion;
  j["command"] = command;
  j["started_at"] = started;
  j["finished_at"] = finished;
  j["config"] = run_config_to_json(cfg);
  j["outputs"] = json(outputs);
  atomic_write_text(path, j.dump(2) + "\n");
}

// ---- CSV ----

inline constexpr const char* kTrajectorySchema = "# trajectory.v1";
inline constexpr const char* kTrajectoryHeader = "epoch,train_loss,val_loss,rank_fingerprint,q,lr";
inline constexpr const char* kMetricsSchema = "# metrics.v1";
inline constexpr const char* kMetricsHeader = "phase,epoch,loss,top1,lr,params,macs,wall_time_s";
inline constexpr const char* kPlotSchema = "# plot.v1";
inline constexpr const char* kPlotHeader = "epoch,train_loss,val_loss,best_val_so_far,rank_changed,q,lr";

inline void write_trajectory_csv(const std::string& path, const std::vector<TrajectoryRow>& rows) {
  std::ostringstream out;
  out << kTrajectorySchema << "\n" << kTrajectoryHeader << "\n";
  for (const TrajectoryRow& r : rows)
    out << r.epoch << "," << fmt_g(r.train_loss) << "," << fmt_g(r.val_loss) << "," << fmt_hex64(r.rank_fingerprint)
        << "," << r.q << "," << fmt_g(r.lr) << "\n";
  atomic_write_text(path, out.str());
}

inline std::vector<TrajectoryRow> read_trajectory_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw data_error(path + ": cannot open");
  std::string line;
  if (!std::getline(f, line) || line != kTrajectorySchema)
    throw data_error(path + ": missing schema line \"" + std::string(kTrajectorySchema) + "\"");
  if (!std::getline(f, line) || line != kTrajectoryHeader) throw data_error(path + ": unexpected header row");
  std::vector<TrajectoryRow> rows;
  size_t lineno = 2;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 6)
      throw data_error(path + ":" + std::to_string(lineno) + ": expected 6 columns, got " +
                       std::to_string(cells.size()));
    try {
      TrajectoryRow r;
      r.epoch = std::stoi(cells[0]);
      r.train_loss = std::stof(cells[1]);
      r.val_loss = std::stof(cells[2]);
      r.rank_fingerprint = std::stoull(cells[3], nullptr, 16);
      r.q = std::stoi(cells[4]);
      r.lr = std::stof(cells[5]);
      rows.push_back(r);
    } catch (const std::exception&) {
      throw data_error(path + ":" + std::to_string(lineno) + ": malformed row \"" + line + "\"");
    }
  }
  return rows;
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricRecord>& records) {
  std::ostringstream out;
  out << kMetricsSchema << "\n" << kMetricsHeader << "\n";
  for (const MetricRecord& r : records)
    out << r.phase << "," << r.epoch << "," << fmt_g(r.loss) << "," << fmt_g(r.top1) << "," << fmt_g(r.lr) << ","
        << r.params << "," << r.macs << "," << fmt_g(r.wall_time_s) << "\n";
  atomic_write_text(path, out.str());
}

// Derived per-epoch columns for plotting: best-so-far validation loss and a
// 0/1 marker on epochs where the architecture rank changed.
inline void write_plot_csv(const std::string& path, const std::vector<TrajectoryRow>& rows) {
  std::ostringstream out;
  out << kPlotSchema << "\n" << kPlotHeader << "\n";
  float best = 0.f;
  for (size_t i = 0; i < rows.size(); ++i) {
    const TrajectoryRow& r = rows[i];
    best = i == 0 ? r.val_loss : std::min(best, r.val_loss);
    const int changed = i == 0 || rows[i - 1].rank_fingerprint != r.rank_fingerprint;
    out << r.epoch << "," << fmt_g(r.train_loss) << "," << fmt_g(r.val_loss) << "," << fmt_g(best) << "," << changed
        << "," << r.q << "," << fmt_g(r.lr) << "\n";
  }
  atomic_write_text(path, out.str());
}

}  // namespace bnas

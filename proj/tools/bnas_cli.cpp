// Command-line front end: search / eval / inspect / export-plot.
// Exit codes: 0 success, 2 configuration or usage error, 3 data error.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "bnas/serialize.hpp"

namespace fs = std::filesystem;
using namespace bnas;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir = ".";
  int64_t seed = -1;  // <0: keep the config's seed
  bool kes = false;
  bool first_order = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "run configuration JSON (or a manifest from a previous run)");
  cmd->add_option("--seed", o.seed, "override the run seed")->check(CLI::NonNegativeNumber);
  cmd->add_flag("--kes", o.kes, "search embedding widths as well");
  cmd->add_flag("--first-order", o.first_order, "skip the virtual weight step in architecture updates");
  cmd->add_option("--out", o.out_dir, "output directory (created if missing)");
}

RunConfig materialize_config(const CommonOpts& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path);
  if (o.seed >= 0) {
    cfg.search.seed = static_cast<uint32_t>(o.seed);
    cfg.eval.seed = cfg.search.seed;
  }
  if (o.kes) cfg.search.kes = true;
  if (o.first_order) cfg.search.virtual_step = 0.f;
  return cfg;
}

Dataset make_dataset(const RunConfig& cfg, bool test_part) {
  if (cfg.data.kind == "synthetic") return synth_dataset(cfg.data.synth, cfg.search.seed, test_part ? 1 : 0);
  const std::string& images = test_part ? cfg.data.test_images_path : cfg.data.images_path;
  const std::string& labels = test_part ? cfg.data.test_labels_path : cfg.data.labels_path;
  if (images.empty() || labels.empty())
    throw config_error(std::string("config: data_kind \"idx\" needs ") +
                       (test_part ? "data_test_images and data_test_labels" : "data_images and data_labels"));
  return load_idx_dataset(images, labels);
}

// Geometry comes from the data, not the config file.
void derive_net_geometry(StackedBcnnConfig& net, const Dataset& d) {
  if (d.height != d.width)
    throw config_error("dataset images are " + std::to_string(d.height) + "x" + std::to_string(d.width) +
                       ", square input required");
  net.num_classes = d.num_classes;
  net.in_channels = d.channels;
  net.input_size = d.height;
}

std::string out_path(const std::string& dir, const char* name) { return (fs::path(dir) / name).string(); }

int cmd_search(const CommonOpts& o) {
  const std::string started = iso_timestamp_utc();
  RunConfig cfg = materialize_config(o);
  const Dataset data = make_dataset(cfg, false);
  derive_net_geometry(cfg.search.net, data);
  fs::create_directories(o.out_dir);

  const SearchResult res = run_search(cfg.search, data);

  const std::string genotype_path = out_path(o.out_dir, "genotype.json");
  const std::string trajectory_path = out_path(o.out_dir, "trajectory.csv");
  const std::string manifest_path = out_path(o.out_dir, "manifest.json");
  save_genotype(res.genotype, genotype_path);
  write_trajectory_csv(trajectory_path, res.trajectory);
  write_manifest(manifest_path, cfg, "search",
                 {{"genotype", genotype_path}, {"trajectory", trajectory_path}}, started, iso_timestamp_utc());

  std::cout << "search: " << res.epochs_run << " epochs, "
            << (res.early_stopped ? "early stop (rank stable)" : "no early stop") << "\n"
            << "genotype:   " << genotype_path << "\n"
            << "trajectory: " << trajectory_path << "\n"
            << "manifest:   " << manifest_path << "\n";
  return 0;
}

int cmd_eval(const CommonOpts& o, const std::string& genotype_path) {
  const std::string started = iso_timestamp_utc();
  RunConfig cfg = materialize_config(o);
  const Genotype genotype = load_genotype(genotype_path);
  const Dataset train = make_dataset(cfg, false);
  const Dataset test = make_dataset(cfg, true);
  derive_net_geometry(cfg.search.net, train);
  if (test.channels != train.channels || test.height != train.height || test.width != train.width ||
      test.num_classes != train.num_classes)
    throw data_error("test set geometry does not match the training set");
  fs::create_directories(o.out_dir);

  const EvalResult res = evaluate(cfg.search.net, genotype, cfg.eval, train, test);

  const std::string metrics_path = out_path(o.out_dir, "metrics.csv");
  const std::string manifest_path = out_path(o.out_dir, "eval_manifest.json");
  write_metrics_csv(metrics_path, res.records);
  write_manifest(manifest_path, cfg, "eval", {{"metrics", metrics_path}, {"genotype", genotype_path}}, started,
                 iso_timestamp_utc());

  char acc[32];
  std::snprintf(acc, sizeof acc, "%.4f", static_cast<double>(res.test_accuracy));
  std::cout << "eval: " << cfg.eval.epochs << " epochs, test accuracy " << acc << "\n"
            << "params: " << res.cost.params << "\n"
            << "macs:   " << res.cost.macs << "\n"
            << "metrics: " << metrics_path << "\n";
  return 0;
}

int cmd_inspect(const CommonOpts& o, const std::string& genotype_path) {
  RunConfig cfg = materialize_config(o);
  const Dataset data = make_dataset(cfg, false);
  derive_net_geometry(cfg.search.net, data);

  Genotype genotype;
  if (!genotype_path.empty()) {
    genotype = load_genotype(genotype_path);
    std::cout << "genotype: " << genotype_path << "\n";
  } else {
    genotype = chain_genotype(cfg.search.net.n_in);
    std::cout << "genotype: built-in conv_3x3 chain (pass --genotype for a searched one)\n";
  }

  ChannelPlan plan = channel_plan(cfg.search.net);
  if (!genotype.embedding_channels.empty()) {
    StackedBcnn::validate_embedding_choices(plan, genotype.embedding_channels);
    apply_embedding_choices(plan, genotype.embedding_channels);
  }
  for (size_t i = 0; i < plan.stages.size(); ++i) {
    const StagePlan& s = plan.stages[i];
    std::cout << "stage " << i + 1 << ": input " << s.in_size << "x" << s.in_size << "x" << s.in_ch
              << "  c_deep=" << s.c_deep << " c_broad=" << s.c_broad << " c_enh=" << s.c_enh
              << " concat=" << s.concat_ch << " out=" << s.out_ch << "\n"
              << "  embeddings: deep_to_out=" << s.deep_to_out.out_ch << " broad_to_out=" << s.broad_to_out.out_ch
              << " deep_to_enh=" << s.deep_to_enh.out_ch << " broad_to_enh=" << s.broad_to_enh.out_ch
              << " enh_to_out=" << s.enh_to_out.out_ch << "\n";
  }
  std::cout << "classifier input: " << plan.gap_ch << "\n";

  StackedBcnn net(cfg.search.net, genotype, cfg.search.seed);
  const ModelCost cost = count_params_flops(net);
  std::cout << "params: " << cost.params << "\n" << "macs:   " << cost.macs << "\n";
  return 0;
}

int cmd_export_plot(const CommonOpts& o, const std::string& trajectory_path) {
  const std::vector<TrajectoryRow> rows = read_trajectory_csv(trajectory_path);
  fs::create_directories(o.out_dir);
  const std::string plot_path = out_path(o.out_dir, "plot.csv");
  write_plot_csv(plot_path, rows);
  std::cout << "plot: " << plot_path << " (" << rows.size() << " rows)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stacked broad-network architecture search toolkit"};
  app.require_subcommand(1);

  CommonOpts search_opts, eval_opts, inspect_opts, plot_opts;
  std::string eval_genotype, inspect_genotype, plot_trajectory;

  CLI::App* search_cmd = app.add_subcommand("search", "run the bilevel architecture search");
  add_common(search_cmd, search_opts);

  CLI::App* eval_cmd = app.add_subcommand("eval", "retrain a genotype from scratch and report test accuracy");
  add_common(eval_cmd, eval_opts);
  eval_cmd->add_option("--genotype", eval_genotype, "genotype JSON to evaluate")->required();

  CLI::App* inspect_cmd = app.add_subcommand("inspect", "print the channel plan, parameter and MAC counts");
  add_common(inspect_cmd, inspect_opts);
  inspect_cmd->add_option("--genotype", inspect_genotype, "genotype JSON to inspect");

  CLI::App* plot_cmd = app.add_subcommand("export-plot", "derive plot-ready columns from a trajectory CSV");
  add_common(plot_cmd, plot_opts);
  plot_cmd->add_option("--trajectory", plot_trajectory, "trajectory CSV from a search run")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*search_cmd) return cmd_search(search_opts);
    if (*eval_cmd) return cmd_eval(eval_opts, eval_genotype);
    if (*inspect_cmd) return cmd_inspect(inspect_opts, inspect_genotype);
    if (*plot_cmd) return cmd_export_plot(plot_opts, plot_trajectory);
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const data_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "apcnet/harness.hpp"

namespace apcnet::harness {

namespace fs = std::filesystem;

namespace {

struct CommonOpts {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<double> epoch_scale;
  std::optional<int> workers;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required = true) {
  auto* c = cmd->add_option("--config", opts.config,
                            "config JSON path or a preset name");
  if (config_required) c->required();
  cmd->add_option("--seed", opts.seed, "RNG seed override");
  cmd->add_option("--out", opts.out, "output directory override");
  cmd->add_option("--epoch-scale", opts.epoch_scale, "epoch count multiplier");
  cmd->add_option("--workers", opts.workers, "parallel sweep cells");
}

ExperimentConfig resolve_config(const CommonOpts& opts) {
  ExperimentConfig config;
  if (fs::exists(opts.config)) {
    config = load_config_file(opts.config);
  } else {
    const auto names = preset_names();
    if (std::find(names.begin(), names.end(), opts.config) != names.end()) {
      config = preset_config(opts.config);
    } else {
      throw ConfigError("--config is neither a file nor a preset name: " +
                        opts.config);
    }
  }
  if (opts.seed) config.seed = *opts.seed;
  if (opts.out) config.out_dir = *opts.out;
  if (opts.epoch_scale) config.epoch_scale = *opts.epoch_scale;
  if (opts.workers) config.workers = *opts.workers;
  return config;
}

void cmd_generate(const ExperimentConfig& config) {
  Dataset d = generate_dataset(config);
  const std::string dir = config.out_dir + "/data";
  fs::create_directories(dir);
  if (!d.field_truth.grid.empty()) {
    fields::write_ensemble_csv(d.field_truth, dir + "/train_field.csv");
  }
  {
    fields::FieldEnsemble u{d.grid, d.u_truth, config.seed, 0.0};
    fields::write_ensemble_csv(u, dir + "/train_u.csv");
  }
  if (!d.test_field.grid.empty()) {
    fields::write_ensemble_csv(d.test_field, dir + "/test_field.csv");
    fields::FieldEnsemble u{d.grid, d.test_u, config.seed, 0.0};
    fields::write_ensemble_csv(u, dir + "/test_u.csv");
  }
  nlohmann::json sensors = {
      {"k_sensor_xs", d.train.k_sensor_xs},
      {"u_sensor_xs", d.train.u_sensor_xs},
      {"collocation_xs", d.train.collocation_xs},
      {"config_hash", config_hash(config)},
  };
  std::ofstream out(dir + "/sensors.json");
  out << sensors.dump(2) << "\n";
  std::cout << "wrote dataset under " << dir << "\n";
}

void cmd_train(const ExperimentConfig& config) {
  auto outcome = run_preset(config);
  std::cout << "trained; final loss " << outcome.training.final_loss.total
            << "; report at " << config.out_dir << "/report.json\n";
}

void cmd_evaluate(const ExperimentConfig& config, const std::string& model_dir) {
  Dataset d = generate_dataset(config);
  auto surrogate = load_bundle(config, d, model_dir.empty()
                                              ? config.out_dir + "/model"
                                              : model_dir);
  auto report = evaluate_model(config, surrogate, d);
  fs::create_directories(config.out_dir);
  std::ofstream out(config.out_dir + "/report.json");
  out << to_report_json(report) << "\n";
  write_report_csv(report, config.out_dir + "/report.csv");
  std::cout << to_report_json(report) << "\n";
}

void cmd_predict(const ExperimentConfig& config, const std::string& model_dir,
                 const std::string& snapshot_csv) {
  Dataset d = generate_dataset(config);
  auto surrogate = load_bundle(config, d, model_dir);
  // One snapshot per row, one column per field sensor.
  std::ifstream in(snapshot_csv);
  if (!in) throw DataError("cannot open snapshot csv: " + snapshot_csv);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty snapshot csv");
  std::vector<std::vector<double>> snapshots;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      std::size_t next = line.find(',', pos);
      if (next == std::string::npos) next = line.size();
      row.push_back(std::stod(line.substr(pos, next - pos)));
      if (next == line.size()) break;
      pos = next + 1;
    }
    snapshots.push_back(std::move(row));
  }
  const auto xs = fields::uniform_grid(config.eval_points);
  fs::create_directories(config.out_dir);
  std::ofstream out(config.out_dir + "/predictions.csv");
  out << "x";
  for (std::size_t s = 0; s < snapshots.size(); ++s) {
    if (surrogate.has_k_nets()) out << ",k_" << s;
    out << ",u_" << s;
  }
  out << "\n";
  std::vector<model::PredictedCurves> curves;
  for (const auto& snap : snapshots) {
    curves.push_back(model::predict_snapshot(surrogate, snap, xs));
  }
  out.precision(17);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    out << xs[i];
    for (const auto& c : curves) {
      if (!c.k.empty()) out << "," << c.k[i];
      out << "," << c.u[i];
    }
    out << "\n";
  }
  std::cout << "wrote " << config.out_dir << "/predictions.csv\n";
}

void cmd_sweep(const ExperimentConfig& config) {
  auto cells = sweep(config);
  fs::create_directories(config.out_dir);
  write_sweep_csv(config, cells, config.out_dir + "/sweep.csv");
  std::cout << "wrote " << config.out_dir << "/sweep.csv\n";
}

void cmd_active(const ExperimentConfig& config) {
  auto log = run_active_learning(config);
  std::cout << "active learning finished after " << log.steps.size()
            << " steps; new sensors: " << log.new_sensor_count() << "\n";
}

void cmd_report(const std::string& report_path) {
  std::ifstream in(report_path);
  if (!in) throw DataError("cannot open report: " + report_path);
  std::stringstream ss;
  ss << in.rdbuf();
  const auto report = from_report_json(ss.str());
  auto line = [&](const char* name, const std::optional<double>& v) {
    if (v) std::cout << name << ": " << *v * 100.0 << "%\n";
  };
  std::cout << "config " << report.config_hash << "\n";
  line("k mean error", report.k_mean_err);
  line("k std error", report.k_std_err);
  line("k prediction error", report.k_pred_err);
  for (std::size_t i = 0; i < report.k_mode_errs.size(); ++i) {
    std::cout << "k mode " << i + 1 << " error: " << report.k_mode_errs[i] * 100.0
              << "%\n";
  }
  line("u mean error", report.u_mean_err);
  line("u std error", report.u_std_err);
  line("u prediction error", report.u_pred_err);
  for (std::size_t i = 0; i < report.u_mode_errs.size(); ++i) {
    std::cout << "u mode " << i + 1 << " error: " << report.u_mode_errs[i] * 100.0
              << "%\n";
  }
  std::cout << "runtime: " << report.runtime_seconds << " s\n";
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Stochastic PDE surrogates from sensor snapshots"};
  app.require_subcommand(1);

  CommonOpts generate_opts, train_opts, evaluate_opts, predict_opts, sweep_opts,
      active_opts;
  std::string model_dir, snapshot_csv, report_path;

  auto* generate = app.add_subcommand("generate", "sample trajectories and sensor data");
  add_common(generate, generate_opts);
  auto* train = app.add_subcommand("train", "run the full pipeline and save the model");
  add_common(train, train_opts);
  auto* predict = app.add_subcommand("predict", "predict curves from new snapshots");
  add_common(predict, predict_opts);
  predict->add_option("model_dir", model_dir, "trained model bundle")->required();
  predict->add_option("snapshot_csv", snapshot_csv, "sensor readings, one row per snapshot")
      ->required();
  auto* evaluate = app.add_subcommand("evaluate", "evaluate a trained model bundle");
  add_common(evaluate, evaluate_opts);
  evaluate->add_option("model_dir", model_dir, "trained model bundle (default <out>/model)");
  auto* active = app.add_subcommand("active-learn", "dropout-guided sensor placement");
  add_common(active, active_opts);
  auto* sweep_cmd = app.add_subcommand("sweep", "one run per parameter value");
  add_common(sweep_cmd, sweep_opts);
  auto* report = app.add_subcommand("report", "print a stored evaluation report");
  report->add_option("report_json", report_path, "report.json path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (generate->parsed()) cmd_generate(resolve_config(generate_opts));
    if (train->parsed()) cmd_train(resolve_config(train_opts));
    if (evaluate->parsed()) cmd_evaluate(resolve_config(evaluate_opts), model_dir);
    if (predict->parsed()) cmd_predict(resolve_config(predict_opts), model_dir, snapshot_csv);
    if (active->parsed()) cmd_active(resolve_config(active_opts));
    if (sweep_cmd->parsed()) cmd_sweep(resolve_config(sweep_opts));
    if (report->parsed()) cmd_report(report_path);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace apcnet::harness

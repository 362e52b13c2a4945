// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: gen | train | eval | gradcheck | ablate | report.
// Exit codes: 0 success, 1 internal failure, 2 usage or input error.
#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "m3c2/config.hpp"
#include "m3c2/databank.hpp"
#include "m3c2/gradsuite.hpp"
#include "m3c2/trainer.hpp"

namespace m3c2::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitUsage = 2;

class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

/// A dataset may be named by its manifest or by the directory holding it.
inline std::filesystem::path dataset_manifest(const std::string& path) {
  std::filesystem::path p(path);
  if (std::filesystem::is_directory(p)) p /= "dataset.manifest";
  if (!std::filesystem::exists(p)) throw InputError("dataset not found: " + p.string());
  return p;
}

inline std::filesystem::path checkpoint_manifest(const std::string& path) {
  std::filesystem::path p(path);
  if (std::filesystem::is_directory(p)) p /= "checkpoint.manifest";
  if (!std::filesystem::exists(p)) throw InputError("checkpoint not found: " + p.string());
  return p;
}

inline KeyValues load_config(const std::string& path) {
  if (path.empty()) return KeyValues::parse("");
  if (!std::filesystem::exists(path)) throw InputError("config not found: " + path);
  return KeyValues::load(path);
}

inline void print_matrix(std::ostream& out, const grad::Tensor& a) {
  for (std::size_t i = 0; i < a.rows(); ++i) {
    out << " ";
    for (std::size_t j = 0; j < a.cols(); ++j) out << ' ' << format_double(a(i, j));
    out << "\n";
  }
}

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p) {
  std::istringstream in(m3c2::detail::read_file(p));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline std::size_t column(const std::vector<std::string>& header, const std::string& name,
                          const std::filesystem::path& file) {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return i;
  throw InputError(file.string() + ": missing column '" + name + "'");
}

/// Width-aligned plain-text table.
inline std::string render_table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows) {
    width.resize(std::max(width.size(), r.size()), 0);
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  }
  std::ostringstream os;
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (i + 1 < r.size()) os << std::left << std::setw(static_cast<int>(width[i] + 2)) << r[i];
      else os << r[i];
    }
    os << "\n";
  }
  return os.str();
}

inline std::string to_csv(const std::vector<std::vector<std::string>>& rows) {
  std::string s;
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) s += (i ? "," : "") + r[i];
    s += "\n";
  }
  return s;
}

/// Comparison rows of an ablation run, or per-epoch rows of a single run.
inline std::vector<std::vector<std::string>> report_rows(const std::filesystem::path& run) {
  const auto ablation = run / "ablation.csv";
  std::vector<std::vector<std::string>> out;
  if (std::filesystem::exists(ablation)) {
    const auto rows = read_csv(ablation);
    if (rows.empty()) throw InputError(ablation.string() + ": empty");
    const auto& h = rows[0];
    const std::vector<std::string> metrics = {"glioma_accuracy", "glioma_auc", "idh_accuracy",
                                              "idh_auc",         "1p19q_accuracy", "cdkn_accuracy",
                                              "nmp_accuracy",    "nmp_auc"};
    std::vector<std::size_t> cols;
    for (const auto& m : metrics) cols.push_back(column(h, m, ablation));
    std::vector<std::string> header = {"variant", "final_loss_total", "final_dcc_overlap"};
    header.insert(header.end(), metrics.begin(), metrics.end());
    out.push_back(header);
    for (std::size_t r = 1; r < rows.size(); ++r) {
      const auto& row = rows[r];
      const auto epochs_file = run / row[0] / "epochs.csv";
      std::vector<std::string> line = {row[0], "n/a", "n/a"};
      if (std::filesystem::exists(epochs_file)) {
        const auto erows = read_csv(epochs_file);
        if (erows.size() >= 2) {
          line[1] = erows.back()[column(erows[0], "loss_total", epochs_file)];
          line[2] = erows.back()[column(erows[0], "dcc_overlap", epochs_file)];
        }
      }
      for (std::size_t c : cols) line.push_back(c < row.size() ? row[c] : "n/a");
      out.push_back(line);
    }
    return out;
  }
  const auto epochs = run / "epochs.csv";
  if (!std::filesystem::exists(epochs)) {
    throw InputError("no ablation.csv or epochs.csv under " + run.string());
  }
  const auto rows = read_csv(epochs);
  if (rows.empty()) throw InputError(epochs.string() + ": empty");
  const std::vector<std::string> keep = {"epoch",   "M_p",        "loss_total", "dcc_overlap",
                                         "acc_idh", "acc_1p19q",  "acc_cdkn",   "acc_nmp",
                                         "acc_glioma", "cmg_molecular_steps", "cmg_histology_steps"};
  std::vector<std::size_t> cols;
  for (const auto& k : keep) cols.push_back(column(rows[0], k, epochs));
  for (const auto& row : rows) {
    std::vector<std::string> line;
    for (std::size_t c : cols) line.push_back(c < row.size() ? row[c] : "n/a");
    out.push_back(line);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands

inline int cmd_gen(const std::string& config, const std::string& out_dir, std::ostream& out) {
  const GenConfig cfg = GenConfig::from_kv(detail::load_config(config));
  const auto bags = generate_dataset(cfg);
  const std::filesystem::path dir(out_dir);
  std::filesystem::create_directories(dir);
  write_dataset(dir / "dataset.manifest", bags);
  const auto hist = class_histogram(bags);
  out << "wrote " << bags.size() << " cases to " << (dir / "dataset.manifest").string() << "\n";
  out << "co-occurrence A:\n";
  detail::print_matrix(out, estimate_cooccurrence(bags).a);
  out << "class histogram:";
  for (std::size_t c = 0; c < hist.size(); ++c) out << " " << c << ":" << hist[c];
  out << "\n";
  return kExitOk;
}

inline TrainConfig train_config(const std::string& config, const std::vector<std::string>& ablate) {
  TrainConfig cfg = TrainConfig::from_kv(detail::load_config(config));
  for (const auto& flag : ablate) cfg.ablation.set(flag);
  return cfg;
}

inline int cmd_train(const std::string& data, const std::string& config, const std::string& out_dir,
                     const std::vector<std::string>& ablate, std::ostream& out) {
  const TrainConfig cfg = train_config(config, ablate);
  const auto bags = read_dataset(detail::dataset_manifest(data));
  out << "variant " << cfg.ablation.label() << ", " << bags.size() << " cases, " << cfg.epochs
      << " epochs\n";
  if (cfg.ablation.no_cmg) out << "gradient modulation disabled: modulation skipped on every step\n";
  out << kEpochCsvHeader << "\n";
  Trainer trainer(bags, cfg);
  std::ostringstream csv;
  csv << kEpochCsvHeader << "\n";
  std::vector<EpochLog> logs;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    logs.push_back(trainer.train_epoch(e));
    const std::string row = epoch_csv_row(logs.back());
    csv << row << "\n";
    out << row << "\n";
  }
  const SplitReports reports = evaluate_splits(trainer);
  const std::filesystem::path dir(out_dir);
  std::filesystem::create_directories(dir);
  m3c2::detail::write_file(dir / "epochs.csv", csv.str());
  const std::string report = format_report(cfg.ablation.label(), reports);
  m3c2::detail::write_file(dir / "report.txt", report);
  save_checkpoint(dir / "checkpoint.manifest", trainer);
  m3c2::detail::write_file(dir / "confidences.csv", confidence_csv(trainer));
  out << "validation: glioma accuracy " << format_metric(reports.validation.task("glioma").accuracy)
      << ", idh accuracy " << format_metric(reports.validation.task("idh").accuracy) << "\n";
  out << "wrote " << dir.string() << "/{epochs.csv,report.txt,checkpoint.manifest,checkpoint.blob,"
      << "confidences.csv}\n";
  return kExitOk;
}

inline int cmd_eval(const std::string& data, const std::string& checkpoint, const std::string& out_dir,
                    std::ostream& out) {
  const Checkpoint ck = load_checkpoint(detail::checkpoint_manifest(checkpoint));
  const auto bags = read_dataset(detail::dataset_manifest(data));
  const std::string report = format_report(ck.variant, evaluate_checkpoint(ck, bags));
  out << report;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    m3c2::detail::write_file(std::filesystem::path(out_dir) / "report.txt", report);
  }
  return kExitOk;
}

inline int cmd_gradcheck(std::uint64_t seed, std::size_t seeds, std::ostream& out) {
  gradsuite::SuiteOptions opt;
  opt.seed = seed;
  opt.seeds = seeds;
  const auto report = gradsuite::full_suite(opt);
  std::size_t failed = 0;
  for (const auto& c : report.cases) {
    if (c.passed) continue;
    ++failed;
    out << "FAIL " << c.name << " seed " << c.seed << " param " << c.worst_param
        << " rel_error " << format_double(c.max_rel_error) << "\n";
  }
  out << "gradcheck: " << report.cases.size() << " checks over " << seeds << " seeds, "
      << report.coords() << " coordinates scored, " << report.straddled()
      << " straddling a branch, max relative error "
      << format_double(report.max_rel_error()) << " (tolerance "
      << format_double(gradsuite::kTolerance) << "): " << (report.passed() ? "pass" : "FAIL") << "\n";
  return report.passed() ? kExitOk : kExitInternal;
}

inline int cmd_ablate(const std::string& config, const std::string& data, const std::string& out_dir,
                      std::ostream& out) {
  const TrainConfig cfg = train_config(config, {});
  const auto bags = data.empty() ? generate_dataset(GenConfig{})
                                 : read_dataset(detail::dataset_manifest(data));
  const AblationTable table = run_ablation(bags, cfg, out_dir, &out);
  out << table.csv();
  return kExitOk;
}

inline int cmd_report(const std::string& run, const std::string& out_file, std::ostream& out) {
  if (!std::filesystem::is_directory(run)) throw InputError("run directory not found: " + run);
  const auto rows = detail::report_rows(run);
  out << detail::render_table(rows);
  if (!out_file.empty()) m3c2::detail::write_file(out_file, detail::to_csv(rows));
  return kExitOk;
}

// ---------------------------------------------------------------------------

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-task glioma classification on synthetic patch bags", "m3c2"};
  app.require_subcommand(1);

  std::string config, out_path, data, checkpoint, run;
  std::vector<std::string> ablate;
  std::uint64_t seed = 0;
  std::size_t seeds = 100;

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--config", config, "generator config (key = value)");
  gen->add_option("--out", out_path, "output directory")->required();

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--data", data, "dataset manifest or directory")->required();
  train->add_option("--config", config, "training config (key = value)");
  train->add_option("--out", out_path, "output directory")->required();
  train->add_option("--ablate", ablate, "ablation flag (repeatable)")
      ->check(CLI::IsMember(std::vector<std::string>(AblationFlags::kNames.begin(),
                                                      AblationFlags::kNames.end())));

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--data", data, "dataset manifest or directory")->required();
  eval->add_option("--checkpoint", checkpoint, "checkpoint manifest or run directory")->required();
  eval->add_option("--out", out_path, "directory for report.txt");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gradcheck->add_option("--seed", seed, "first seed");
  gradcheck->add_option("--seeds", seeds, "number of seeds")->check(CLI::PositiveNumber);

  auto* abl = app.add_subcommand("ablate", "full model plus every single-flag ablation");
  abl->add_option("--config", config, "training config (key = value)");
  abl->add_option("--data", data, "dataset (default: generated with default settings)");
  abl->add_option("--out", out_path, "output directory")->required();

  auto* report = app.add_subcommand("report", "summarize a run or ablation directory");
  report->add_option("--run", run, "run directory")->required();
  report->add_option("--out", out_path, "CSV output file");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen(config, out_path, out);
    if (*train) return cmd_train(data, config, out_path, ablate, out);
    if (*eval) return cmd_eval(data, checkpoint, out_path, out);
    if (*gradcheck) return cmd_gradcheck(seed, seeds, out);
    if (*abl) return cmd_ablate(config, data, out_path, out);
    if (*report) return cmd_report(run, out_path, out);
  } catch (const InputError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  err << "error: no command\n";
  return kExitUsage;
}

}  // namespace m3c2::cli

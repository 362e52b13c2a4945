// SPDX-License-Identifier: Apache-2.0
//
// Training loop: minibatch loss aggregation, gradient modulation between the
// task paths, AdamW updates, curriculum on the overlap constraint, metric
// evaluation, run outputs and the ablation harness.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3c2/config.hpp"
#include "m3c2/databank.hpp"
#include "m3c2/interaction.hpp"
#include "m3c2/metrics.hpp"
#include "m3c2/model.hpp"
#include "m3c2/optim.hpp"

namespace m3c2 {

// ---------------------------------------------------------------------------
// Configuration

struct AblationFlags {
  bool no_graph = false;
  bool no_lc = false;
  bool no_dcc = false;
  bool no_disent = false;
  bool no_cmg = false;
  bool no_guide = false;
  bool no_rescale = false;

  static constexpr std::array<const char*, 7> kNames = {
      "no_graph", "no_lc", "no_dcc", "no_disent", "no_cmg", "no_guide", "no_rescale"};

  bool* find(const std::string& name) {
    if (name == "no_graph") return &no_graph;
    if (name == "no_lc") return &no_lc;
    if (name == "no_dcc") return &no_dcc;
    if (name == "no_disent") return &no_disent;
    if (name == "no_cmg") return &no_cmg;
    if (name == "no_guide") return &no_guide;
    if (name == "no_rescale") return &no_rescale;
    return nullptr;
  }
  bool get(const std::string& name) const {
    return *const_cast<AblationFlags*>(this)->find(name);
  }
  void set(const std::string& name, bool value = true) {
    bool* f = find(name);
    if (!f) throw ConfigError("unknown ablation flag '" + name + "'");
    *f = value;
  }
  std::string label() const {
    std::string s;
    for (const char* n : kNames)
      if (get(n)) s += (s.empty() ? "" : "+") + std::string(n);
    return s.empty() ? "full" : s;
  }
};

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 6;
  double lr = 0.003;
  double weight_decay = 1e-4;
  double lambda_mol = 1.0;
  double lambda_his = 1.0;
  double lambda_glioma = 1.0;
  double lambda_disent = 1.0;
  double lambda_lc = 1.0;
  double lambda_dcc = 1.0;
  CurriculumSchedule curriculum{};
  double alpha = 0.5;
  double tau = kDefaultTemperature;
  std::uint64_t seed = 0;
  double train_fraction = 0.7;
  AblationFlags ablation{};

  void validate() const {
    if (epochs < 1 || batch_size < 1 || !(lr >= 0.0)) {
      throw ConfigError("train config: epochs and batch_size must be >= 1, lr >= 0");
    }
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("train config: alpha must lie in [0,1]");
    if (!(tau > 0.0)) throw ConfigError("train config: tau must be > 0");
    if (!(curriculum.beta > 0.0 && curriculum.beta <= 1.0)) {
      throw ConfigError("train config: beta must lie in (0,1]");
    }
    if (curriculum.m0 < 1 || curriculum.p0 < 1) {
      throw ConfigError("train config: M_0 and p_0 must be >= 1");
    }
    if (!(train_fraction > 0.0 && train_fraction <= 1.0)) {
      throw ConfigError("train config: train_fraction must lie in (0,1]");
    }
  }

  static TrainConfig from_kv(const KeyValues& kv) {
    std::vector<std::string> known = {
        "epochs",    "batch_size", "lr",        "weight_decay", "lambda_mol",    "lambda_his",
        "lambda_glioma", "lambda_disent", "lambda_lc", "lambda_dcc", "M_0", "beta", "p_0",
        "alpha",     "tau",        "seed",      "train_fraction"};
    for (const char* n : AblationFlags::kNames) known.emplace_back(n);
    kv.require_known(known);
    TrainConfig c;
    kv.read("epochs", c.epochs);
    kv.read("batch_size", c.batch_size);
    kv.read("lr", c.lr);
    kv.read("weight_decay", c.weight_decay);
    kv.read("lambda_mol", c.lambda_mol);
    kv.read("lambda_his", c.lambda_his);
    kv.read("lambda_glioma", c.lambda_glioma);
    kv.read("lambda_disent", c.lambda_disent);
    kv.read("lambda_lc", c.lambda_lc);
    kv.read("lambda_dcc", c.lambda_dcc);
    kv.read("M_0", c.curriculum.m0);
    kv.read("beta", c.curriculum.beta);
    kv.read("p_0", c.curriculum.p0);
    kv.read("alpha", c.alpha);
    kv.read("tau", c.tau);
    std::size_t seed = c.seed;
    kv.read("seed", seed);
    c.seed = seed;
    kv.read("train_fraction", c.train_fraction);
    for (const char* n : AblationFlags::kNames) kv.read(n, *c.ablation.find(n));
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Loss aggregation

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& term, std::size_t bag)
      : std::runtime_error("non-finite loss term '" + term + "' in batch entry " +
                           std::to_string(bag)),
        term_(term) {}
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

struct LossBreakdown {
  grad::Var total;
  // Unweighted batch means.
  double glioma = 0, mol = 0, his = 0, disent = 0, lc = 0, dcc = 0, dcc_overlap = 0;
};

/// Batch mean of the weighted multi-task objective. Ablated or zero-weighted
/// terms are left out of the graph.
inline LossBreakdown total_loss(std::span<const BagLosses> bags, const TrainConfig& cfg) {
  using namespace grad;
  if (bags.empty()) throw std::invalid_argument("total_loss: empty batch");
  LossBreakdown out;
  Var acc;
  auto accumulate = [&acc](const Var& term, double weight) {
    if (weight == 0.0) return;
    const Var w = scale(term, weight);
    acc = acc.defined() ? add(acc, w) : w;
  };
  const double wd = cfg.ablation.no_disent ? 0.0 : cfg.lambda_disent;
  const double wl = cfg.ablation.no_lc ? 0.0 : cfg.lambda_lc;
  const double wc = cfg.ablation.no_dcc ? 0.0 : cfg.lambda_dcc;
  for (std::size_t b = 0; b < bags.size(); ++b) {
    const BagLosses& l = bags[b];
    const std::pair<const char*, const Var*> terms[] = {
        {"glioma", &l.glioma}, {"idh", &l.idh},       {"1p19q", &l.codel}, {"cdkn", &l.cdkn},
        {"nmp", &l.nmp},       {"disent", &l.disent}, {"lc", &l.lc},       {"dcc", &l.dcc}};
    for (const auto& [name, v] : terms) {
      if (!std::isfinite(v->item())) throw NonFiniteLoss(name, b);
    }
    accumulate(l.glioma, cfg.lambda_glioma);
    accumulate(l.idh, cfg.lambda_mol);
    accumulate(l.codel, cfg.lambda_mol);
    accumulate(l.cdkn, cfg.lambda_mol);
    accumulate(l.nmp, cfg.lambda_his);
    accumulate(l.disent, wd);
    accumulate(l.lc, wl);
    accumulate(l.dcc, wc);
    out.glioma += l.glioma.item();
    out.mol += l.idh.item() + l.codel.item() + l.cdkn.item();
    out.his += l.nmp.item();
    out.disent += l.disent.item();
    out.lc += l.lc.item();
    out.dcc += l.dcc.item();
    out.dcc_overlap += l.dcc_overlap;
  }
  const double inv = 1.0 / static_cast<double>(bags.size());
  out.total = acc.defined() ? scale(acc, inv) : constant(Tensor::scalar(0.0));
  for (double* d : {&out.glioma, &out.mol, &out.his, &out.disent, &out.lc, &out.dcc,
                    &out.dcc_overlap})
    *d *= inv;
  return out;
}

/// 1 if positives >= negatives (ties go positive).
inline int majority_vote(std::span<const int> labels) {
  if (labels.empty()) throw std::invalid_argument("majority_vote: empty batch");
  std::size_t pos = 0;
  for (int l : labels) pos += l == 1 ? 1 : 0;
  return 2 * pos >= labels.size() ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Split

struct Split {
  std::vector<std::size_t> train, validation;
};

/// Per-class shuffle; the first round(fraction * count) cases of every class train.
inline Split stratified_split(const std::vector<PatchBag>& bags, double fraction,
                              std::uint64_t seed) {
  std::mt19937_64 rng(splitmix64(seed ^ 0x7370117a11dULL));
  Split s;
  for (int c = 0; c < static_cast<int>(kGliomaClasses); ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < bags.size(); ++i)
      if (bags[i].glioma_class == c) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < idx.size(); ++i) (i < n_train ? s.train : s.validation).push_back(idx[i]);
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.validation.begin(), s.validation.end());
  return s;
}

// ---------------------------------------------------------------------------
// Predictions and metrics

inline constexpr std::array<const char*, 5> kTaskNames = {"idh", "1p19q", "cdkn", "nmp", "glioma"};

struct CasePrediction {
  std::array<std::array<double, 2>, 4> binary{};  // idh, 1p19q, cdkn, nmp
  std::array<double, kGliomaClasses> glioma{};
};

inline std::vector<double> softmax_row(const grad::Tensor& logits) {
  double mx = logits[0];
  for (double v : logits.data()) mx = std::max(mx, v);
  std::vector<double> p(logits.numel());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p) v /= z;
  return p;
}

inline CasePrediction predict(const BagForward& f) {
  CasePrediction p;
  auto two = [](const grad::Var& v) {
    const auto s = softmax_row(v.value());
    return std::array<double, 2>{s[0], s[1]};
  };
  for (std::size_t i = 0; i < kMarkers; ++i) p.binary[i] = two(f.mol.logits[i]);
  p.binary[3] = two(f.his.logits);
  const auto g = softmax_row(f.glioma_logits.value());
  std::copy(g.begin(), g.end(), p.glioma.begin());
  return p;
}

struct MetricReport {
  std::array<TaskMetrics, 5> tasks{};
  std::size_t cases = 0;
  const TaskMetrics& task(const std::string& name) const {
    for (std::size_t i = 0; i < kTaskNames.size(); ++i)
      if (name == kTaskNames[i]) return tasks[i];
    throw std::invalid_argument("unknown task " + name);
  }
};

inline MetricReport compute_metrics(std::span<const CasePrediction> preds,
                                    std::span<const PatchBag* const> bags) {
  if (preds.size() != bags.size()) throw std::invalid_argument("compute_metrics: length mismatch");
  MetricReport r;
  r.cases = preds.size();
  for (std::size_t t = 0; t < 4; ++t) {
    std::vector<int> labels, predicted;
    std::vector<double> scores;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const auto& m = bags[i]->markers;
      const int y = t == 0 ? m.idh_mut : t == 1 ? m.codel_1p19q : t == 2 ? m.cdkn_homdel : m.nmp;
      labels.push_back(y);
      predicted.push_back(argmax(preds[i].binary[t]));
      scores.push_back(preds[i].binary[t][1]);
    }
    r.tasks[t] = binary_metrics(labels, predicted, scores);
  }
  std::vector<int> labels, predicted;
  std::vector<std::array<double, kGliomaClasses>> probs;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    labels.push_back(bags[i]->glioma_class);
    predicted.push_back(argmax(preds[i].glioma));
    probs.push_back(preds[i].glioma);
  }
  r.tasks[4] = micro_metrics<kGliomaClasses>(labels, predicted, probs);
  return r;
}

inline std::string format_metric(const Metric& m) { return m ? format_double(*m) : "undefined"; }

// ---------------------------------------------------------------------------
// Epoch loop

struct StepRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  int nmp_majority = 0;
  bool modulated = false;
  ModulationResult result;
  const GradientSet* before = nullptr;  // only populated for observers
  const GradientSet* after = nullptr;
};

using StepObserver = std::function<void(const StepRecord&)>;

struct EpochLog {
  std::size_t epoch = 0;
  std::size_t m_p = 0;
  double loss_total = 0, loss_glioma = 0, loss_mol = 0, loss_his = 0, loss_disent = 0,
         loss_lc = 0, loss_dcc = 0, dcc_overlap = 0;
  std::array<Metric, 5> val_accuracy{};
  std::size_t cmg_molecular = 0, cmg_histology = 0, cmg_skipped = 0;
};

inline const char* kEpochCsvHeader =
    "epoch,M_p,loss_total,loss_glioma,loss_mol,loss_his,loss_disent,loss_lc,loss_dcc,"
    "dcc_overlap,acc_idh,acc_1p19q,acc_cdkn,acc_nmp,acc_glioma,cmg_molecular_steps,"
    "cmg_histology_steps,cmg_skipped_steps";

inline std::string epoch_csv_row(const EpochLog& e) {
  std::ostringstream os;
  os << e.epoch << ',' << e.m_p;
  for (double v : {e.loss_total, e.loss_glioma, e.loss_mol, e.loss_his, e.loss_disent, e.loss_lc,
                   e.loss_dcc, e.dcc_overlap})
    os << ',' << format_double(v);
  for (const auto& a : e.val_accuracy) os << ',' << format_metric(a);
  os << ',' << e.cmg_molecular << ',' << e.cmg_histology << ',' << e.cmg_skipped;
  return os.str();
}

class Trainer {
 public:
  Trainer(std::vector<PatchBag> data, const TrainConfig& cfg)
      : data_(std::move(data)),
        cfg_(cfg),
        split_(make_split(data_, cfg)),
        model_(make_model_config(data_, cfg), train_cooccurrence()),
        adam_(model_.store(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay}) {}

  static ModelConfig make_model_config(const std::vector<PatchBag>& data, const TrainConfig& cfg) {
    if (data.empty()) throw std::invalid_argument("Trainer: empty dataset");
    ModelConfig m;
    m.K = data[0].features();
    m.alpha = cfg.alpha;
    m.seed = cfg.seed;
    return m;
  }

  ForwardOptions forward_options(std::size_t epoch) const {
    ForwardOptions o;
    o.use_graph = !cfg_.ablation.no_graph;
    o.dcc_m = curriculum_m(epoch, cfg_.curriculum, data_[0].patches());
    o.tau = cfg_.tau;
    return o;
  }

  EpochLog train_epoch(std::size_t epoch, const StepObserver& observer = {}) {
    EpochLog log;
    log.epoch = epoch;
    const ForwardOptions opt = forward_options(epoch);
    log.m_p = opt.dcc_m;

    std::vector<std::size_t> order = split_.train;
    std::mt19937_64 rng(splitmix64(cfg_.seed) ^ splitmix64(0xe90c4 + epoch));
    std::shuffle(order.begin(), order.end(), rng);

    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
      model_.store().zero_grad();
      std::vector<BagLosses> losses;
      std::vector<int> nmp_labels;
      for (std::size_t i = start; i < end; ++i) {
        const PatchBag& bag = data_[order[i]];
        losses.push_back(model_.forward(bag, opt).losses);
        nmp_labels.push_back(bag.markers.nmp);
      }
      const LossBreakdown lb = total_loss(losses, cfg_);
      grad::backward(lb.total);
      losses.clear();

      GradientSet grads = GradientSet::from_store(model_.store());
      StepRecord rec;
      rec.epoch = epoch;
      rec.step = steps;
      rec.nmp_majority = majority_vote(nmp_labels);
      if (!cfg_.ablation.no_cmg) {
        std::optional<GradientSet> before;
        if (observer) before = grads;
        rec.result = cmg_modulate(grads, rec.nmp_majority,
                                  {!cfg_.ablation.no_guide, !cfg_.ablation.no_rescale});
        rec.modulated = true;
        if (!rec.result.projected) ++log.cmg_skipped;
        else if (rec.result.modulated == Partition::Molecular) ++log.cmg_molecular;
        else ++log.cmg_histology;
        if (observer) {
          rec.before = &*before;
          rec.after = &grads;
          observer(rec);
        }
      } else {
        ++log.cmg_skipped;
        if (observer) {
          rec.before = &grads;
          rec.after = &grads;
          observer(rec);
        }
      }
      adam_.step(model_.store(), grads);

      log.loss_total += lb.total.item();
      log.loss_glioma += lb.glioma;
      log.loss_mol += lb.mol;
      log.loss_his += lb.his;
      log.loss_disent += lb.disent;
      log.loss_lc += lb.lc;
      log.loss_dcc += lb.dcc;
      log.dcc_overlap += lb.dcc_overlap * static_cast<double>(end - start);
      ++steps;
    }
    const double inv_steps = steps > 0 ? 1.0 / static_cast<double>(steps) : 0.0;
    for (double* d : {&log.loss_total, &log.loss_glioma, &log.loss_mol, &log.loss_his,
                      &log.loss_disent, &log.loss_lc, &log.loss_dcc})
      *d *= inv_steps;
    if (!order.empty()) log.dcc_overlap /= static_cast<double>(order.size());

    if (!split_.validation.empty()) {
      const MetricReport val = evaluate(split_.validation);
      for (std::size_t t = 0; t < 5; ++t) log.val_accuracy[t] = val.tasks[t].accuracy;
    }
    return log;
  }

  std::vector<CasePrediction> predict_cases(std::span<const std::size_t> idx) const {
    grad::NoGradGuard no_grad;
    const ForwardOptions opt = forward_options(0);
    std::vector<CasePrediction> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(predict(model_.forward(data_[i], opt)));
    return out;
  }

  MetricReport evaluate(std::span<const std::size_t> idx) const {
    const auto preds = predict_cases(idx);
    std::vector<const PatchBag*> bags;
    for (std::size_t i : idx) bags.push_back(&data_[i]);
    return compute_metrics(preds, bags);
  }

  std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> idx(data_.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
  }

  const Split& split() const { return split_; }
  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  const std::vector<PatchBag>& data() const { return data_; }

 private:
  static Split make_split(const std::vector<PatchBag>& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("Trainer: empty dataset");
    Split s = stratified_split(data, cfg.train_fraction, cfg.seed);
    if (s.train.empty()) throw std::invalid_argument("Trainer: empty training split");
    return s;
  }

  grad::Tensor train_cooccurrence() const {
    std::vector<std::array<int, 3>> labels;
    for (std::size_t i : split_.train) labels.push_back(data_[i].markers.molecular());
    return estimate_cooccurrence(labels).a;
  }

  std::vector<PatchBag> data_;
  TrainConfig cfg_;
  Split split_;
  Model model_;
  AdamW adam_;
};

// ---------------------------------------------------------------------------
// Reports and checkpoints

struct SplitReports {
  MetricReport train, validation, all;
};

inline SplitReports evaluate_splits(const Trainer& t) {
  return {t.evaluate(t.split().train), t.evaluate(t.split().validation),
          t.evaluate(t.all_indices())};
}

inline std::string format_report(const std::string& variant, const SplitReports& r) {
  std::ostringstream os;
  os << "m3c2-report 1\n";
  os << "variant = " << variant << "\n";
  const std::pair<const char*, const MetricReport*> sections[] = {
      {"train", &r.train}, {"validation", &r.validation}, {"all", &r.all}};
  for (const auto& [name, rep] : sections) {
    os << "\n[" << name << "]\n";
    os << "cases = " << rep->cases << "\n";
    for (std::size_t t = 0; t < kTaskNames.size(); ++t) {
      const auto& m = rep->tasks[t];
      os << kTaskNames[t] << ".accuracy = " << format_metric(m.accuracy) << "\n";
      os << kTaskNames[t] << ".sensitivity = " << format_metric(m.sensitivity) << "\n";
      os << kTaskNames[t] << ".specificity = " << format_metric(m.specificity) << "\n";
      os << kTaskNames[t] << ".auc = " << format_metric(m.auc) << "\n";
      os << kTaskNames[t] << ".f1 = " << format_metric(m.f1) << "\n";
    }
  }
  return os.str();
}

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Manifest of model settings and named parameter shapes; parameters as
/// little-endian float64 in the sibling `.blob`.
inline void save_checkpoint(const std::filesystem::path& manifest, const Trainer& t) {
  const Model& model = t.model();
  const TrainConfig& cfg = t.config();
  std::ostringstream man;
  std::string blob;
  man << "m3c2-checkpoint 1\n";
  man << "blob " << blob_path_for(manifest).filename().string() << "\n";
  man << "variant " << cfg.ablation.label() << "\n";
  man << "K " << model.config().K << "\n";
  man << "pool_hidden " << model.config().attention_width() << "\n";
  man << "alpha " << format_double(model.config().alpha) << "\n";
  man << "seed " << cfg.seed << "\n";
  man << "train_fraction " << format_double(cfg.train_fraction) << "\n";
  man << "use_graph " << (cfg.ablation.no_graph ? 0 : 1) << "\n";
  man << "cooccurrence";
  for (double v : model.cooccurrence().data()) man << ' ' << format_double(v);
  man << "\n";
  man << "params " << model.store().params().size() << "\n";
  for (const auto& p : model.store().params()) {
    const auto& v = p.var.value();
    man << p.name << ' ' << v.rows() << ' ' << v.cols() << ' ' << blob.size() << "\n";
    for (double d : v.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(d);
      for (int b = 0; b < 8; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
    }
  }
  detail::write_file(manifest, man.str());
  detail::write_file(blob_path_for(manifest), blob);
}

struct Checkpoint {
  std::string variant;
  ModelConfig model;
  grad::Tensor cooccurrence = grad::Tensor(3, 3);
  std::uint64_t seed = 0;
  double train_fraction = 0.7;
  bool use_graph = true;
  struct Entry {
    std::string name;
    grad::Tensor value;
  };
  std::vector<Entry> params;

  /// Fresh model with the stored values, matched by name and shape.
  Model build() const {
    Model m(model, cooccurrence);
    auto& store = m.store().params();
    if (store.size() != params.size()) {
      throw CheckpointError("checkpoint: parameter count " + std::to_string(params.size()) +
                            " does not match model (" + std::to_string(store.size()) + ")");
    }
    for (std::size_t i = 0; i < store.size(); ++i) {
      if (store[i].name != params[i].name || !store[i].var.value().same_shape(params[i].value)) {
        throw CheckpointError("checkpoint: parameter '" + params[i].name + "' does not match model");
      }
      store[i].var.mutable_value() = params[i].value;
    }
    return m;
  }
};

inline Checkpoint load_checkpoint(const std::filesystem::path& manifest) {
  std::string text;
  try {
    text = detail::read_file(manifest);
  } catch (const DataError& e) {
    throw CheckpointError(e.what());
  }
  std::istringstream in(text);
  auto expect = [&in](const std::string& key) {
    std::string line;
    if (!std::getline(in, line)) throw CheckpointError("checkpoint: missing '" + key + "'");
    std::istringstream ls(line);
    std::string got;
    ls >> got;
    if (got != key) throw CheckpointError("checkpoint: expected '" + key + "', got '" + got + "'");
    std::string rest;
    std::getline(ls, rest);
    return detail::trim(rest);
  };
  auto to_size = [](const std::string& key, const std::string& v) {
    try {
      return static_cast<std::size_t>(KeyValues::to_size(key, v));
    } catch (const ConfigError& e) {
      throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
  };
  auto to_double = [](const std::string& key, const std::string& v) {
    try {
      return KeyValues::to_double(key, v);
    } catch (const ConfigError& e) {
      throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
  };
  Checkpoint c;
  if (expect("m3c2-checkpoint") != "1") throw CheckpointError("checkpoint: unsupported version");
  const std::string blob_name = expect("blob");
  c.variant = expect("variant");
  c.model.K = to_size("K", expect("K"));
  c.model.pool_hidden = to_size("pool_hidden", expect("pool_hidden"));
  c.model.alpha = to_double("alpha", expect("alpha"));
  c.seed = to_size("seed", expect("seed"));
  c.model.seed = c.seed;
  c.train_fraction = to_double("train_fraction", expect("train_fraction"));
  c.use_graph = to_size("use_graph", expect("use_graph")) != 0;
  {
    std::istringstream ls(expect("cooccurrence"));
    for (std::size_t i = 0; i < 9; ++i) {
      std::string tok;
      if (!(ls >> tok)) throw CheckpointError("checkpoint: cooccurrence needs 9 values");
      c.cooccurrence[i] = to_double("cooccurrence", tok);
    }
  }
  const std::size_t count = to_size("params", expect("params"));
  std::string blob;
  try {
    blob = detail::read_file(manifest.parent_path() / blob_name);
  } catch (const DataError& e) {
    throw CheckpointError(e.what());
  }
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  for (std::size_t i = 0; i < count; ++i) {
    std::string line;
    if (!std::getline(in, line)) throw CheckpointError("checkpoint: truncated parameter list");
    std::istringstream ls(line);
    std::string name, r, cc, off;
    if (!(ls >> name >> r >> cc >> off)) throw CheckpointError("checkpoint: bad parameter line");
    const std::size_t rows = to_size("rows", r), cols = to_size("cols", cc),
                      offset = to_size("offset", off);
    const std::size_t nbytes = rows * cols * 8;
    if (offset > blob.size() || blob.size() - offset < nbytes) {
      throw CheckpointError("checkpoint: truncated blob for parameter '" + name + "'");
    }
    grad::Tensor t(rows, cols);
    for (std::size_t j = 0; j < rows * cols; ++j) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b)
        bits |= static_cast<std::uint64_t>(bytes[offset + 8 * j + b]) << (8 * b);
      t[j] = std::bit_cast<double>(bits);
    }
    c.params.push_back({name, std::move(t)});
  }
  return c;
}

/// Metrics of a stored model on `data`, with the split it was trained on.
inline SplitReports evaluate_checkpoint(const Checkpoint& ck, const std::vector<PatchBag>& data) {
  if (data.empty()) throw std::invalid_argument("evaluate_checkpoint: empty dataset");
  if (data[0].features() != ck.model.K) {
    throw DataError("dataset feature width " + std::to_string(data[0].features()) +
                    " does not match checkpoint K " + std::to_string(ck.model.K));
  }
  const Model model = ck.build();
  const Split split = stratified_split(data, ck.train_fraction, ck.seed);
  ForwardOptions opt;
  opt.use_graph = ck.use_graph;
  grad::NoGradGuard no_grad;
  auto eval = [&](const std::vector<std::size_t>& idx) {
    std::vector<CasePrediction> preds;
    std::vector<const PatchBag*> bags;
    for (std::size_t i : idx) {
      preds.push_back(predict(model.forward(data[i], opt)));
      bags.push_back(&data[i]);
    }
    return compute_metrics(preds, bags);
  };
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return {eval(split.train), eval(split.validation), eval(all)};
}

// ---------------------------------------------------------------------------
// Full runs

inline constexpr const char* kConfidenceCsvHeader = "case_id,patch_index,c_wt,c_nmp";

inline std::string confidence_csv(const Trainer& t) {
  grad::NoGradGuard no_grad;
  std::ostringstream os;
  os << kConfidenceCsvHeader << "\n";
  const ForwardOptions opt = t.forward_options(t.config().epochs - 1);
  for (const auto& bag : t.data()) {
    const BagForward f = t.model().forward(bag, opt);
    for (std::size_t n = 0; n < bag.patches(); ++n) {
      os << bag.case_id << ',' << n << ',' << format_double(f.c_wt.value()[n]) << ','
         << format_double(f.c_nmp.value()[n]) << "\n";
    }
  }
  return os.str();
}

struct RunResult {
  std::string variant;
  std::vector<EpochLog> epochs;
  SplitReports reports;
};

/// Trains for cfg.epochs and, when `out_dir` is non-empty, writes
/// epochs.csv, report.txt, checkpoint.manifest/.blob and confidences.csv.
inline RunResult run_training(const std::vector<PatchBag>& data, const TrainConfig& cfg,
                              const std::filesystem::path& out_dir = {},
                              const StepObserver& observer = {},
                              std::ostream* progress = nullptr) {
  Trainer trainer(data, cfg);
  RunResult res;
  res.variant = cfg.ablation.label();
  std::ostringstream csv;
  csv << kEpochCsvHeader << "\n";
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    res.epochs.push_back(trainer.train_epoch(e, observer));
    csv << epoch_csv_row(res.epochs.back()) << "\n";
    if (progress) *progress << "epoch " << e << " " << epoch_csv_row(res.epochs.back()) << "\n";
  }
  res.reports = evaluate_splits(trainer);
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    detail::write_file(out_dir / "epochs.csv", csv.str());
    detail::write_file(out_dir / "report.txt", format_report(res.variant, res.reports));
    save_checkpoint(out_dir / "checkpoint.manifest", trainer);
    detail::write_file(out_dir / "confidences.csv", confidence_csv(trainer));
  }
  return res;
}

inline std::vector<std::string> ablation_variants() {
  std::vector<std::string> v = {"full"};
  for (const char* n : AblationFlags::kNames) v.emplace_back(n);
  return v;
}

inline std::string ablation_csv_header() {
  std::string h = "variant";
  for (const char* t : kTaskNames)
    for (const char* m : {"accuracy", "sensitivity", "specificity", "auc", "f1"})
      h += std::string(",") + t + "_" + m;
  return h;
}

inline std::string ablation_csv_row(const std::string& variant, const MetricReport& r) {
  std::string s = variant;
  for (const auto& m : r.tasks) {
    for (const Metric* v : {&m.accuracy, &m.sensitivity, &m.specificity, &m.auc, &m.f1})
      s += "," + format_metric(*v);
  }
  return s;
}

struct AblationTable {
  std::vector<std::string> variants;
  std::vector<MetricReport> validation;
  std::string csv() const {
    std::string s = ablation_csv_header() + "\n";
    for (std::size_t i = 0; i < variants.size(); ++i)
      s += ablation_csv_row(variants[i], validation[i]) + "\n";
    return s;
  }
};

/// The full model plus one run per single ablation flag, same seed and data.
/// Each variant's outputs go to `out_dir/<variant>/`, the table to
/// `out_dir/ablation.csv`.
inline AblationTable run_ablation(const std::vector<PatchBag>& data, const TrainConfig& base,
                                  const std::filesystem::path& out_dir = {},
                                  std::ostream* progress = nullptr) {
  AblationTable table;
  for (const auto& variant : ablation_variants()) {
    TrainConfig cfg = base;
    cfg.ablation = {};
    if (variant != "full") cfg.ablation.set(variant);
    const auto sub = out_dir.empty() ? std::filesystem::path{} : out_dir / variant;
    if (progress) *progress << "variant " << variant << "\n";
    const RunResult r = run_training(data, cfg, sub);
    table.variants.push_back(variant);
    table.validation.push_back(r.reports.validation);
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    detail::write_file(out_dir / "ablation.csv", table.csv());
  }
  return table;
}

}  // namespace m3c2

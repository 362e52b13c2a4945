// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "m3c2/trainer.hpp"
#include "test_util.hpp"

using namespace m3c2;
using namespace m3c2::grad;
using m3c2::testing::TempDir;

namespace {

std::vector<PatchBag> small_dataset(std::size_t cases = 24, std::uint64_t seed = 3) {
  GenConfig g;
  g.n_cases = cases;
  g.N = 6;
  g.K = 4;
  g.seed = seed;
  return generate_dataset(g);
}

TrainConfig quick_config(std::size_t epochs = 2) {
  TrainConfig c;
  c.epochs = epochs;
  return c;
}

BagLosses scalar_losses(double glioma, double idh, double codel, double cdkn, double nmp,
                        double disent, double lc, double dcc, double overlap = 0.0) {
  BagLosses l;
  l.glioma = constant(Tensor::scalar(glioma));
  l.idh = constant(Tensor::scalar(idh));
  l.codel = constant(Tensor::scalar(codel));
  l.cdkn = constant(Tensor::scalar(cdkn));
  l.nmp = constant(Tensor::scalar(nmp));
  l.disent = constant(Tensor::scalar(disent));
  l.lc = constant(Tensor::scalar(lc));
  l.dcc = constant(Tensor::scalar(dcc));
  l.dcc_overlap = overlap;
  return l;
}

std::vector<Tensor> snapshot(const ParameterStore& s) {
  std::vector<Tensor> out;
  for (const auto& p : s.params()) out.push_back(p.var.value());
  return out;
}

}  // namespace

TEST(MajorityVote, Examples) {
  EXPECT_EQ(majority_vote(std::vector<int>{1, 1, 0}), 1);
  EXPECT_EQ(majority_vote(std::vector<int>{0, 0, 0}), 0);
  EXPECT_EQ(majority_vote(std::vector<int>{1, 0}), 1);
  EXPECT_EQ(majority_vote(std::vector<int>{0, 0, 1}), 0);
  EXPECT_THROW(majority_vote(std::vector<int>{}), std::invalid_argument);
}

TEST(TotalLoss, TwoBagHandOracle) {
  TrainConfig cfg;
  cfg.lambda_glioma = 1.5;
  cfg.lambda_mol = 0.5;
  cfg.lambda_his = 2.0;
  cfg.lambda_disent = 0.25;
  cfg.lambda_lc = 3.0;
  cfg.lambda_dcc = 0.1;
  const std::vector<BagLosses> bags = {scalar_losses(1.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.5),
                                       scalar_losses(0.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 1.9, 1.0)};
  const LossBreakdown lb = total_loss(bags, cfg);
  const double b1 = 1.5 * 1.2 + 0.5 * (0.3 + 0.4 + 0.5) + 2.0 * 0.6 + 0.25 * 0.7 + 3.0 * 0.8 + 0.1 * 0.9;
  const double b2 = 1.5 * 0.2 + 0.5 * (1.3 + 1.4 + 1.5) + 2.0 * 1.6 + 0.25 * 1.7 + 3.0 * 1.8 + 0.1 * 1.9;
  EXPECT_NEAR(lb.total.item(), 0.5 * (b1 + b2), 1e-12);
  EXPECT_NEAR(lb.glioma, 0.7, 1e-12);
  EXPECT_NEAR(lb.mol, 0.5 * (1.2 + 4.2), 1e-12);
  EXPECT_NEAR(lb.dcc_overlap, 0.75, 1e-12);
}

TEST(TotalLoss, AblationFlagsDropTerms) {
  TrainConfig cfg;
  cfg.ablation.no_disent = true;
  cfg.ablation.no_lc = true;
  cfg.ablation.no_dcc = true;
  const std::vector<BagLosses> bags = {scalar_losses(1.0, 1.0, 1.0, 1.0, 1.0, 5.0, 6.0, 7.0)};
  EXPECT_NEAR(total_loss(bags, cfg).total.item(), 5.0, 1e-15);
}

TEST(TotalLoss, AuxiliaryWeightsZeroGiveMeanGliomaCe) {
  const auto data = small_dataset(6);
  Model model(Trainer::make_model_config(data, TrainConfig{}), estimate_cooccurrence(data).a);
  TrainConfig cfg;
  cfg.lambda_mol = cfg.lambda_his = cfg.lambda_disent = cfg.lambda_lc = cfg.lambda_dcc = 0.0;
  std::vector<BagLosses> losses;
  double ce = 0.0;
  for (const auto& b : data) {
    losses.push_back(model.forward(b).losses);
    ce += losses.back().glioma.item();
  }
  EXPECT_NEAR(total_loss(losses, cfg).total.item(), ce / static_cast<double>(data.size()), 1e-14);
}

TEST(TotalLoss, PerfectLogitsGiveZeroCe) {
  for (std::size_t target = 0; target < 4; ++target) {
    Tensor logits(1, 4);
    logits[target] = 50.0;
    EXPECT_LE(softmax_cross_entropy(constant(logits), target).item(), 1e-6);
  }
}

TEST(TotalLoss, NonFiniteTermIsNamed) {
  const std::vector<BagLosses> bags = {
      scalar_losses(1, 1, 1, 1, 1, 1, 1, 1),
      scalar_losses(1, 1, 1, 1, 1, 1, std::numeric_limits<double>::quiet_NaN(), 1)};
  try {
    total_loss(bags, TrainConfig{});
    FAIL() << "expected NonFiniteLoss";
  } catch (const NonFiniteLoss& e) {
    EXPECT_EQ(e.term(), "lc");
    EXPECT_NE(std::string(e.what()).find("batch entry 1"), std::string::npos);
  }
  EXPECT_THROW(total_loss(std::vector<BagLosses>{}, TrainConfig{}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Plain-double reference forward for the multi-head CE objective

namespace ref {

using Mat = std::vector<std::vector<double>>;

Mat of(const Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t(i, j);
  return m;
}

Mat mm(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

Mat tr(const Mat& a) {
  Mat t(a[0].size(), std::vector<double>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
  return t;
}

Mat plus(const Mat& a, const Mat& b) {
  Mat c = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) c[i][j] += b[i][j];
  return c;
}

Mat times(const Mat& a, double s) {
  Mat c = a;
  for (auto& r : c)
    for (auto& v : r) v *= s;
  return c;
}

Mat relu(Mat a) {
  for (auto& r : a)
    for (auto& v : r) v = std::max(0.0, v);
  return a;
}

Mat hcat(const Mat& a, const Mat& b) {
  Mat c = a;
  for (std::size_t i = 0; i < a.size(); ++i) c[i].insert(c[i].end(), b[i].begin(), b[i].end());
  return c;
}

struct Params {
  const ParameterStore& s;
  Mat operator()(const std::string& n) const {
    const Parameter* p = s.find(n);
    if (!p) throw std::runtime_error("missing " + n);
    return of(p->var.value());
  }
};

Mat linear(const Params& P, const std::string& n, const Mat& x) {
  Mat y = mm(x, P(n + ".weight"));
  const Mat b = P(n + ".bias");
  for (auto& r : y)
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += b[0][j];
  return y;
}

Mat mlp(const Params& P, const std::string& n, const Mat& x) {
  return linear(P, n + ".fc2", relu(linear(P, n + ".fc1", x)));
}

Mat layer_norm(const Params& P, const std::string& n, const Mat& x) {
  const Mat g = P(n + ".gamma"), b = P(n + ".beta");
  Mat y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double k = static_cast<double>(x[i].size());
    double mu = 0.0, var = 0.0;
    for (double v : x[i]) mu += v;
    mu /= k;
    for (double v : x[i]) var += (v - mu) * (v - mu);
    var /= k;
    for (std::size_t j = 0; j < x[i].size(); ++j)
      y[i][j] = g[0][j] * (x[i][j] - mu) / std::sqrt(var + 1e-5) + b[0][j];
  }
  return y;
}

Mat softmax_rows(Mat a) {
  for (auto& r : a) {
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (auto& v : r) z += (v = std::exp(v - mx));
    for (auto& v : r) v /= z;
  }
  return a;
}

Mat block(const Params& P, const std::string& n, const Mat& f) {
  const Mat x = layer_norm(P, n + ".ln1", f);
  const Mat q = mm(x, P(n + ".attn.q")), k = mm(x, P(n + ".attn.k")), v = mm(x, P(n + ".attn.v"));
  const Mat probs = softmax_rows(times(mm(q, tr(k)), 1.0 / std::sqrt(static_cast<double>(f[0].size()))));
  const Mat h = plus(f, mm(mm(probs, v), P(n + ".attn.o")));
  const Mat ff = linear(P, n + ".ffn.fc2", relu(linear(P, n + ".ffn.fc1", layer_norm(P, n + ".ln2", h))));
  return plus(h, ff);
}

Mat pool(const Params& P, const std::string& n, const Mat& f) {
  Mat s = mm(f, tr(P(n + ".V")));
  for (auto& r : s)
    for (auto& v : r) v = std::tanh(v);
  const Mat a = softmax_rows(tr(mm(s, P(n + ".w"))));  // 1 x N
  return mm(a, f);
}

double ce(const Mat& logits, std::size_t target) {
  const Mat p = softmax_rows(logits);
  return -std::log(p[0][target]);
}

/// Unweighted CE terms: glioma, idh, 1p19q, cdkn, nmp.
std::array<double, 5> forward(const ParameterStore& store, const Tensor& a, const PatchBag& bag) {
  const Params P{store};
  const double wl = P("disent.w_low")[0][0], wh = P("disent.w_high")[0][0];
  const Mat base = linear(P, "disent.base", hcat(times(of(bag.feats_low), wl), times(of(bag.feats_high), wh)));
  const Mat um = linear(P, "disent.U_m", hcat(mlp(P, "disent.S_m", base), mlp(P, "disent.I_m", base)));
  const Mat uh = linear(P, "disent.U_h", hcat(mlp(P, "disent.S_h", base), mlp(P, "disent.I_h", base)));

  std::array<Mat, 3> fin;
  Mat x = um;
  const char* names[3] = {"idh", "1p19q", "cdkn"};
  const std::size_t depth[3] = {3, 2, 2};
  for (int i = 0; i < 3; ++i) {
    for (std::size_t b = 0; b < depth[i]; ++b)
      x = block(P, std::string("mol.") + names[i] + ".block" + std::to_string(b), x);
    fin[i] = x;
  }
  const Mat wg = P("mol.graph.W");
  std::array<double, 5> out{};
  Mat mol_mean;
  const int labels[3] = {bag.markers.idh_mut, bag.markers.codel_1p19q, bag.markers.cdkn_homdel};
  for (int i = 0; i < 3; ++i) {
    Mat mixed = times(fin[0], a(i, 0));
    for (int j = 1; j < 3; ++j) mixed = plus(mixed, times(fin[j], a(i, j)));
    const Mat fout = plus(times(relu(mm(mixed, wg)), 0.5), times(fin[i], 0.5));
    const Mat z = pool(P, std::string("mol.") + names[i] + ".pool", fout);
    mol_mean = mol_mean.empty() ? z : plus(mol_mean, z);
    out[1 + i] = ce(linear(P, std::string("mol.") + names[i] + ".cls", z), labels[i]);
  }
  mol_mean = times(mol_mean, 1.0 / 3.0);
  Mat hf = uh;
  for (int b = 0; b < 3; ++b) hf = block(P, "his.nmp.block" + std::to_string(b), hf);
  const Mat zh = pool(P, "his.nmp.pool", hf);
  out[4] = ce(linear(P, "his.nmp.cls", zh), bag.markers.nmp);
  out[0] = ce(linear(P, "fusion.cls", hcat(zh, mol_mean)), bag.glioma_class);
  return out;
}

}  // namespace ref

TEST(TotalLoss, MatchesIndependentReferenceForward) {
  const auto data = small_dataset(6, 11);
  const Tensor a = estimate_cooccurrence(data).a;
  Model model(Trainer::make_model_config(data, TrainConfig{}), a);
  m3c2::testing::randomize(model.store(), 5, -0.6, 0.6);
  TrainConfig cfg;
  cfg.lambda_glioma = 1.3;
  cfg.lambda_mol = 0.7;
  cfg.lambda_his = 1.9;
  cfg.lambda_disent = cfg.lambda_lc = cfg.lambda_dcc = 0.0;
  std::vector<BagLosses> losses;
  double expected = 0.0;
  for (const auto& b : data) {
    losses.push_back(model.forward(b).losses);
    const auto r = ref::forward(model.store(), a, b);
    expected += 1.3 * r[0] + 0.7 * (r[1] + r[2] + r[3]) + 1.9 * r[4];
    EXPECT_NEAR(losses.back().glioma.item(), r[0], 1e-10);
    EXPECT_NEAR(losses.back().nmp.item(), r[4], 1e-10);
  }
  expected /= static_cast<double>(data.size());
  EXPECT_NEAR(total_loss(losses, cfg).total.item(), expected, 1e-10);
}

// ---------------------------------------------------------------------------
// Split

TEST(StratifiedSplit, PartitionsEveryClass) {
  const auto data = small_dataset(60, 4);
  const Split s = stratified_split(data, 0.7, 9);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  for (std::size_t i : s.validation) EXPECT_TRUE(all.insert(i).second) << "overlap at " << i;
  EXPECT_EQ(all.size(), data.size());
  const auto hist = class_histogram(data);
  for (int c = 0; c < 4; ++c) {
    std::size_t n_train = 0;
    for (std::size_t i : s.train) n_train += data[i].glioma_class == c;
    EXPECT_EQ(n_train, static_cast<std::size_t>(std::lround(0.7 * static_cast<double>(hist[c]))));
  }
  const Split again = stratified_split(data, 0.7, 9);
  EXPECT_EQ(again.train, s.train);
  EXPECT_NE(stratified_split(data, 0.7, 10).train, s.train);
  EXPECT_TRUE(stratified_split(data, 1.0, 9).validation.empty());
}

// ---------------------------------------------------------------------------
// Training runs

TEST(Trainer, EpochOneIsBitwiseDeterministic) {
  const auto data = small_dataset();
  Trainer a(data, quick_config()), b(data, quick_config());
  a.train_epoch(0);
  b.train_epoch(0);
  const auto pa = snapshot(a.model().store()), pb = snapshot(b.model().store());
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i], pb[i]) << a.model().store().params()[i].name;
}

TEST(Trainer, ZeroWeightsAndZeroLrLeaveParametersUnchanged) {
  const auto data = small_dataset();
  TrainConfig cfg = quick_config();
  cfg.lr = 0.0;
  cfg.lambda_glioma = cfg.lambda_mol = cfg.lambda_his = cfg.lambda_disent = cfg.lambda_lc =
      cfg.lambda_dcc = 0.0;
  Trainer t(data, cfg);
  const auto before = snapshot(t.model().store());
  t.train_epoch(0);
  const auto after = snapshot(t.model().store());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i], after[i]);
}

TEST(Trainer, LossDecreasesOnSeparableData) {
  GenConfig g;
  g.n_cases = 120;
  g.seed = 0;
  const auto data = generate_dataset(g);
  TrainConfig cfg;
  cfg.epochs = 10;
  Trainer t(data, cfg);
  const EpochLog first = t.train_epoch(0);
  EpochLog last;
  for (std::size_t e = 1; e < 10; ++e) last = t.train_epoch(e);
  EXPECT_LT(last.loss_total, first.loss_total);
}

TEST(Trainer, EpochLogCounts) {
  const auto data = small_dataset();
  Trainer t(data, quick_config());
  const EpochLog log = t.train_epoch(0);
  const std::size_t steps = (t.split().train.size() + 5) / 6;
  EXPECT_EQ(log.cmg_molecular + log.cmg_histology + log.cmg_skipped, steps);
  EXPECT_EQ(log.m_p, 6u);  // M_0 = 8 clamped to N = 6
  EXPECT_TRUE(log.val_accuracy[4].has_value());
  const std::string row = epoch_csv_row(log);
  EXPECT_EQ(std::count(row.begin(), row.end(), ','),
            std::count(kEpochCsvHeader, kEpochCsvHeader + std::strlen(kEpochCsvHeader), ','));
}

TEST(Trainer, NoCmgSkipsEveryStep) {
  const auto data = small_dataset();
  TrainConfig cfg = quick_config();
  cfg.ablation.no_cmg = true;
  Trainer t(data, cfg);
  std::size_t seen = 0;
  const EpochLog log = t.train_epoch(0, [&](const StepRecord& r) {
    EXPECT_FALSE(r.modulated);
    ++seen;
  });
  EXPECT_EQ(log.cmg_molecular + log.cmg_histology, 0u);
  EXPECT_EQ(log.cmg_skipped, seen);
}

TEST(Trainer, ModulationInvariantsOnEveryStep) {
  const auto data = small_dataset();
  Trainer t(data, quick_config());
  std::size_t steps = 0;
  t.train_epoch(0, [&](const StepRecord& r) {
    ASSERT_TRUE(r.modulated);
    const auto mod = r.after->flat(r.result.modulated);
    const auto ref = aligned_reference(r.before->flat(r.result.reference), mod.size());
    EXPECT_LE(std::abs(dot(mod, ref)), 1e-8 * norm(mod) * norm(ref));
    EXPECT_NEAR(norm(mod), norm(r.before->flat(r.result.modulated)), 1e-8);
    EXPECT_EQ(r.after->flat(r.result.reference), r.before->flat(r.result.reference));
    EXPECT_EQ(r.after->flat(Partition::Shared), r.before->flat(Partition::Shared));
    ++steps;
  });
  EXPECT_GT(steps, 0u);
}

// ---------------------------------------------------------------------------
// Metrics over a run

TEST(ComputeMetrics, PerfectPredictionsScoreOne) {
  const auto data = small_dataset(20);
  std::vector<CasePrediction> preds;
  std::vector<const PatchBag*> bags;
  for (const auto& b : data) {
    CasePrediction p;
    const int labels[4] = {b.markers.idh_mut, b.markers.codel_1p19q, b.markers.cdkn_homdel, b.markers.nmp};
    for (int t = 0; t < 4; ++t) p.binary[t] = {labels[t] ? 0.1 : 0.9, labels[t] ? 0.9 : 0.1};
    p.glioma.fill(0.0);
    p.glioma[b.glioma_class] = 1.0;
    preds.push_back(p);
    bags.push_back(&b);
  }
  const MetricReport r = compute_metrics(preds, bags);
  EXPECT_EQ(r.cases, 20u);
  EXPECT_EQ(r.task("glioma").accuracy, 1.0);
  EXPECT_EQ(r.task("glioma").auc, 1.0);
  EXPECT_EQ(r.task("idh").accuracy, 1.0);
  EXPECT_THROW(r.task("nope"), std::invalid_argument);
  EXPECT_EQ(format_metric(std::nullopt), "undefined");
}

// ---------------------------------------------------------------------------
// Checkpoints and full runs

TEST(Checkpoint, RoundTripReproducesParametersAndMetrics) {
  TempDir dir("ckpt");
  const auto data = small_dataset();
  TrainConfig cfg = quick_config(1);
  cfg.ablation.no_graph = true;
  Trainer t(data, cfg);
  t.train_epoch(0);
  save_checkpoint(dir / "checkpoint.manifest", t);
  const Checkpoint ck = load_checkpoint(dir / "checkpoint.manifest");
  EXPECT_EQ(ck.variant, "no_graph");
  EXPECT_FALSE(ck.use_graph);
  EXPECT_EQ(ck.cooccurrence, t.model().cooccurrence());
  const Model m = ck.build();
  const auto pa = snapshot(t.model().store()), pb = snapshot(m.store());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i], pb[i]);
  const SplitReports direct = evaluate_splits(t);
  const SplitReports loaded = evaluate_checkpoint(ck, data);
  EXPECT_EQ(format_report("x", direct), format_report("x", loaded));
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  TempDir dir("ckpt_bad");
  const auto data = small_dataset();
  Trainer t(data, quick_config(1));
  save_checkpoint(dir / "checkpoint.manifest", t);
  EXPECT_THROW(load_checkpoint(dir / "missing.manifest"), CheckpointError);
  {
    std::ofstream(dir / "checkpoint.blob", std::ios::binary | std::ios::trunc) << "short";
  }
  EXPECT_THROW(load_checkpoint(dir / "checkpoint.manifest"), CheckpointError);
  {
    std::ofstream(dir / "bad.manifest") << "m3c2-checkpoint 2\n";
  }
  EXPECT_THROW(load_checkpoint(dir / "bad.manifest"), CheckpointError);
}

TEST(RunTraining, WritesAllOutputsDeterministically) {
  TempDir a("run_a"), b("run_b");
  const auto data = small_dataset();
  run_training(data, quick_config(), a.path());
  run_training(data, quick_config(), b.path());
  for (const char* f : {"epochs.csv", "report.txt", "checkpoint.manifest", "checkpoint.blob",
                        "confidences.csv"}) {
    ASSERT_TRUE(std::filesystem::exists(a / f)) << f;
    EXPECT_EQ(m3c2::detail::read_file(a / f), m3c2::detail::read_file(b / f)) << f;
  }
  const std::string conf = m3c2::detail::read_file(a / "confidences.csv");
  EXPECT_EQ(static_cast<std::size_t>(std::count(conf.begin(), conf.end(), '\n')), 1 + data.size() * 6);
}

TEST(Ablation, OneRowPerVariantAndFullMatchesStandalone) {
  TempDir dir("ablate");
  const auto data = small_dataset();
  const TrainConfig cfg = quick_config(1);
  const AblationTable table = run_ablation(data, cfg, dir.path());
  ASSERT_EQ(table.variants.size(), 1u + AblationFlags::kNames.size());
  EXPECT_EQ(table.variants[0], "full");
  const std::string csv = m3c2::detail::read_file(dir / "ablation.csv");
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), 2u + AblationFlags::kNames.size());
  const RunResult standalone = run_training(data, cfg);
  EXPECT_EQ(ablation_csv_row("full", standalone.reports.validation),
            ablation_csv_row("full", table.validation[0]));
  for (const auto& v : table.variants) EXPECT_TRUE(std::filesystem::exists(dir / v / "report.txt")) << v;
}

TEST(TrainConfigKv, ParsesKeysAndFlags) {
  const auto kv = KeyValues::parse("epochs = 7\nlr = 0.01\nM_0 = 4\nbeta = 0.25\np_0=3\nno_lc = true\nseed = 12\n");
  const TrainConfig c = TrainConfig::from_kv(kv);
  EXPECT_EQ(c.epochs, 7u);
  EXPECT_EQ(c.lr, 0.01);
  EXPECT_EQ(c.curriculum.m0, 4u);
  EXPECT_EQ(c.curriculum.beta, 0.25);
  EXPECT_EQ(c.curriculum.p0, 3u);
  EXPECT_TRUE(c.ablation.no_lc);
  EXPECT_EQ(c.seed, 12u);
  EXPECT_EQ(c.ablation.label(), "no_lc");
  EXPECT_THROW(TrainConfig::from_kv(KeyValues::parse("bogus = 1\n")), ConfigError);
  EXPECT_THROW(TrainConfig::from_kv(KeyValues::parse("alpha = 2\n")), ConfigError);
  EXPECT_THROW(TrainConfig::from_kv(KeyValues::parse("epochs = 0\n")), ConfigError);
  EXPECT_THROW(TrainConfig::from_kv(KeyValues::parse("beta = 0\n")), ConfigError);
  AblationFlags f;
  EXPECT_EQ(f.label(), "full");
  f.set("no_cmg");
  f.set("no_graph");
  EXPECT_EQ(f.label(), "no_graph+no_cmg");
  EXPECT_THROW(f.set("no_such"), ConfigError);
}

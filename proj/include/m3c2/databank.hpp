// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-magnification patch bags, glioma label derivation, marker
// co-occurrence estimation, and the manifest + blob dataset format.
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3c2/config.hpp"
#include "m3c2/gradcore.hpp"

namespace m3c2 {

struct MarkerTuple {
  int idh_mut = 0;
  int codel_1p19q = 0;
  int cdkn_homdel = 0;
  int nmp = 0;

  bool operator==(const MarkerTuple&) const = default;
  /// IDH, 1p/19q, CDKN as used by the molecular head.
  std::array<int, 3> molecular() const { return {idh_mut, codel_1p19q, cdkn_homdel}; }
};

/// 0 glioblastoma (IDH wildtype), 3 oligodendroglioma (IDH mutant + 1p/19q
/// codeletion), 1 high-grade astrocytoma (IDH mutant, no codeletion, CDKN
/// HOMDEL or NMP), 2 low-grade astrocytoma otherwise.
inline int derive_glioma_class(const MarkerTuple& m) {
  if (m.idh_mut == 0) return 0;
  if (m.codel_1p19q == 1) return 3;
  if (m.cdkn_homdel == 1 || m.nmp == 1) return 1;
  return 2;
}

struct PatchBag {
  std::string case_id;
  grad::Tensor feats_high;  // N x K, 20X analogue
  grad::Tensor feats_low;   // N x K, 10X analogue
  MarkerTuple markers;
  int glioma_class = 0;

  std::size_t patches() const { return feats_high.rows(); }
  std::size_t features() const { return feats_high.cols(); }
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Generator configuration

struct GenConfig {
  std::size_t n_cases = 300;
  std::size_t N = 32;
  std::size_t K = 16;
  double signal_strength = 5.0;
  double evidence_fraction = 0.25;
  double nmp_given_idhwt = 0.9;
  // P(idh_mut), P(codel | idh_mut), P(cdkn_homdel), P(nmp | idh_mut)
  std::vector<double> marker_priors = {0.5, 0.4, 0.3, 0.03};
  std::uint64_t seed = 0;

  void validate() const {
    auto prob = [](double p, const char* what) {
      if (!(p >= 0.0 && p <= 1.0)) {
        throw ConfigError(std::string("gen config: ") + what + " must lie in [0,1]");
      }
    };
    if (n_cases < 1 || N < 1 || K < 1) throw ConfigError("gen config: sizes must be >= 1");
    if (marker_priors.size() != 4) {
      throw ConfigError("gen config: marker_priors needs 4 probabilities");
    }
    for (double p : marker_priors) prob(p, "marker_priors");
    prob(nmp_given_idhwt, "nmp_given_idhwt");
    prob(evidence_fraction, "evidence_fraction");
    if (!(signal_strength >= 0.0) || !std::isfinite(signal_strength)) {
      throw ConfigError("gen config: signal_strength must be finite and >= 0");
    }
  }

  static GenConfig from_kv(const KeyValues& kv) {
    kv.require_known({"n_cases", "N", "K", "signal_strength", "evidence_fraction",
                      "nmp_given_idhwt", "marker_priors", "seed"});
    GenConfig c;
    kv.read("n_cases", c.n_cases);
    kv.read("N", c.N);
    kv.read("K", c.K);
    kv.read("signal_strength", c.signal_strength);
    kv.read("evidence_fraction", c.evidence_fraction);
    kv.read("nmp_given_idhwt", c.nmp_given_idhwt);
    kv.read("marker_priors", c.marker_priors);
    std::size_t seed = c.seed;
    kv.read("seed", seed);
    c.seed = seed;
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Seeding

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Independent stream per (seed, case_id).
inline std::mt19937_64 case_stream(std::uint64_t seed, const std::string& case_id) {
  return std::mt19937_64(splitmix64(splitmix64(seed) ^ fnv1a(case_id)));
}

inline std::string case_name(std::size_t i) {
  std::string s = std::to_string(i);
  return "case_" + std::string(s.size() < 4 ? 4 - s.size() : 0, '0') + s;
}

// ---------------------------------------------------------------------------
// Sampling

inline bool bernoulli(std::mt19937_64& rng, double p) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
}

/// Draws a marker tuple; 1p/19q codeletion only ever occurs with IDH mutation.
inline MarkerTuple sample_case(std::mt19937_64& rng, const GenConfig& cfg) {
  const double p_mut = cfg.marker_priors[0];
  const double p_codel = cfg.marker_priors[1];
  const double p_cdkn = cfg.marker_priors[2];
  const double p_nmp_mut = cfg.marker_priors[3];
  MarkerTuple m;
  m.idh_mut = bernoulli(rng, p_mut) ? 1 : 0;
  const bool codel = bernoulli(rng, p_codel);
  m.codel_1p19q = (m.idh_mut == 1 && codel) ? 1 : 0;
  m.cdkn_homdel = bernoulli(rng, p_cdkn) ? 1 : 0;
  m.nmp = bernoulli(rng, m.idh_mut == 1 ? p_nmp_mut : cfg.nmp_given_idhwt) ? 1 : 0;
  return m;
}

/// Unit directions u[marker][label] planted into evidence patches, fixed per seed.
inline std::array<std::array<std::vector<double>, 2>, 4> signal_directions(const GenConfig& cfg) {
  std::mt19937_64 rng(splitmix64(cfg.seed ^ 0x5157a15d1ec7104eULL));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::array<std::array<std::vector<double>, 2>, 4> dirs;
  for (auto& marker : dirs) {
    for (auto& d : marker) {
      d.resize(cfg.K);
      double n2 = 0.0;
      for (double& x : d) {
        x = normal(rng);
        n2 += x * x;
      }
      const double inv = 1.0 / std::sqrt(n2);
      for (double& x : d) x *= inv;
    }
  }
  return dirs;
}

/// Storage precision of the dataset blob.
inline double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

/// Standard-Gaussian background with label-specific directions added to an
/// evidence subset of patches: IDH, 1p/19q and CDKN at high magnification,
/// NMP at low magnification.
inline PatchBag generate_bag(const MarkerTuple& m, const GenConfig& cfg, std::mt19937_64& rng,
                             std::string case_id = "case") {
  const auto dirs = signal_directions(cfg);
  std::normal_distribution<double> normal(0.0, 1.0);
  PatchBag bag;
  bag.case_id = std::move(case_id);
  bag.markers = m;
  bag.glioma_class = derive_glioma_class(m);
  bag.feats_high = grad::Tensor(cfg.N, cfg.K);
  bag.feats_low = grad::Tensor(cfg.N, cfg.K);
  for (std::size_t i = 0; i < bag.feats_high.numel(); ++i) bag.feats_high[i] = normal(rng);
  for (std::size_t i = 0; i < bag.feats_low.numel(); ++i) bag.feats_low[i] = normal(rng);

  const auto n_evidence = static_cast<std::size_t>(
      std::lround(cfg.evidence_fraction * static_cast<double>(cfg.N)));
  const std::array<int, 4> labels = {m.idh_mut, m.codel_1p19q, m.cdkn_homdel, m.nmp};
  std::vector<std::size_t> idx(cfg.N);
  for (std::size_t marker = 0; marker < 4; ++marker) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    grad::Tensor& target = marker == 3 ? bag.feats_low : bag.feats_high;
    const auto& dir = dirs[marker][static_cast<std::size_t>(labels[marker])];
    for (std::size_t e = 0; e < n_evidence && e < cfg.N; ++e) {
      for (std::size_t k = 0; k < cfg.K; ++k) target(idx[e], k) += cfg.signal_strength * dir[k];
    }
  }
  for (double& v : bag.feats_high.storage()) v = to_f32(v);
  for (double& v : bag.feats_low.storage()) v = to_f32(v);
  return bag;
}

inline std::vector<PatchBag> generate_dataset(const GenConfig& cfg) {
  cfg.validate();
  std::vector<PatchBag> bags;
  bags.reserve(cfg.n_cases);
  for (std::size_t i = 0; i < cfg.n_cases; ++i) {
    const std::string id = case_name(i);
    auto rng = case_stream(cfg.seed, id);
    const MarkerTuple m = sample_case(rng, cfg);
    bags.push_back(generate_bag(m, cfg, rng, id));
  }
  return bags;
}

// ---------------------------------------------------------------------------
// Patch-count alignment

/// M < N repeats rows cyclically; M > N averages N contiguous buckets whose
/// boundaries are ceil(b * M / N).
inline grad::Tensor align_patch_count(const grad::Tensor& feats, std::size_t n) {
  if (n < 1) throw std::invalid_argument("align_patch_count: target must be >= 1");
  const std::size_t m = feats.rows();
  const std::size_t k = feats.cols();
  if (m < 1) throw std::invalid_argument("align_patch_count: empty input");
  if (m == n) return feats;
  grad::Tensor out(n, k);
  if (m < n) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < k; ++c) out(r, c) = feats(r % m, c);
    return out;
  }
  auto boundary = [m, n](std::size_t b) { return (b * m + n - 1) / n; };
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t lo = boundary(b), hi = boundary(b + 1);
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t r = lo; r < hi; ++r) s += feats(r, c);
      out(b, c) = s / static_cast<double>(hi - lo);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Co-occurrence

struct CooccurrenceMatrix {
  grad::Tensor a = grad::Tensor(3, 3);
  std::array<std::array<std::size_t, 3>, 3> counts{};  // joint positives
  std::size_t n_cases = 0;
};

/// A_ij = (p(i|j) + p(j|i)) / 2 with p(i|j) = P(i positive | j positive), 0/0 -> 0.
inline CooccurrenceMatrix estimate_cooccurrence(const std::vector<std::array<int, 3>>& labels) {
  CooccurrenceMatrix c;
  c.n_cases = labels.size();
  for (const auto& row : labels)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j)
        if (row[i] == 1 && row[j] == 1) ++c.counts[i][j];
  auto cond = [&c](std::size_t i, std::size_t j) {
    const std::size_t pos_j = c.counts[j][j];
    return pos_j == 0 ? 0.0 : static_cast<double>(c.counts[i][j]) / static_cast<double>(pos_j);
  };
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) c.a(i, j) = 0.5 * (cond(i, j) + cond(j, i));
  return c;
}

inline CooccurrenceMatrix estimate_cooccurrence(const std::vector<PatchBag>& bags) {
  std::vector<std::array<int, 3>> labels;
  labels.reserve(bags.size());
  for (const auto& b : bags) labels.push_back(b.markers.molecular());
  return estimate_cooccurrence(labels);
}

// ---------------------------------------------------------------------------
// Dataset file format
//
//   m3c2-dataset 1
//   blob <file name next to the manifest>
//   cases <count>
//   patches <N>
//   features <K>
//   case_id patches features idh_mut codel_1p19q cdkn_homdel nmp glioma_class offset_high offset_low
//   <one row per case>
//
// The blob holds little-endian float32 values, row-major, the high
// magnification matrix followed by the low one. A glioma_class of '-' is
// derived from the markers on read. Rows whose patch count differs from the
// header are aligned with align_patch_count.

inline constexpr const char* kDatasetMagic = "m3c2-dataset";
inline constexpr const char* kDatasetColumns =
    "case_id patches features idh_mut codel_1p19q cdkn_homdel nmp glioma_class offset_high "
    "offset_low";

namespace detail {

inline void put_f32(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
}

inline float get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
  return std::bit_cast<float>(bits);
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + p.string());
}

inline int parse_binary(const std::string& s, const std::string& what, const std::string& id) {
  if (s == "0") return 0;
  if (s == "1") return 1;
  throw DataError("case " + id + ": " + what + " must be 0 or 1, got '" + s + "'");
}

}  // namespace detail

inline std::filesystem::path blob_path_for(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".blob");
  return p;
}

/// Writes `<manifest>` and the sibling `.blob`.
inline void write_dataset(const std::filesystem::path& manifest, const std::vector<PatchBag>& bags) {
  if (bags.empty()) throw DataError("write_dataset: no bags");
  const std::size_t n = bags[0].patches(), k = bags[0].features();
  const auto blob_path = blob_path_for(manifest);
  std::string blob;
  std::ostringstream man;
  man << kDatasetMagic << " 1\n"
      << "blob " << blob_path.filename().string() << "\n"
      << "cases " << bags.size() << "\n"
      << "patches " << n << "\n"
      << "features " << k << "\n"
      << kDatasetColumns << "\n";
  for (const auto& b : bags) {
    if (!b.feats_high.same_shape(b.feats_low) || b.features() != k) {
      throw DataError("case " + b.case_id + ": dimension mismatch");
    }
    if (!b.feats_high.all_finite() || !b.feats_low.all_finite()) {
      throw DataError("case " + b.case_id + ": non-finite feature value");
    }
    const std::size_t off_high = blob.size();
    for (double v : b.feats_high.data()) detail::put_f32(blob, static_cast<float>(v));
    const std::size_t off_low = blob.size();
    for (double v : b.feats_low.data()) detail::put_f32(blob, static_cast<float>(v));
    man << b.case_id << ' ' << b.patches() << ' ' << b.features() << ' ' << b.markers.idh_mut
        << ' ' << b.markers.codel_1p19q << ' ' << b.markers.cdkn_homdel << ' ' << b.markers.nmp
        << ' ' << b.glioma_class << ' ' << off_high << ' ' << off_low << '\n';
  }
  detail::write_file(manifest, man.str());
  detail::write_file(blob_path, blob);
}

struct DatasetHeader {
  std::string blob;
  std::size_t cases = 0, patches = 0, features = 0;
};

/// Reads a dataset. `target_patches` overrides the header's patch count.
inline std::vector<PatchBag> read_dataset(const std::filesystem::path& manifest,
                                          std::optional<std::size_t> target_patches = {}) {
  std::istringstream in(detail::read_file(manifest));
  auto header_field = [&in](const std::string& key) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("corrupt header: missing '" + key + "'");
    std::istringstream ls(line);
    std::string got, value, extra;
    if (!(ls >> got >> value) || got != key || (ls >> extra)) {
      throw DataError("corrupt header: expected '" + key + " <value>', got '" + line + "'");
    }
    return value;
  };
  auto header_size = [&](const std::string& key) {
    const std::string v = header_field(key);
    try {
      return static_cast<std::size_t>(KeyValues::to_size(key, v));
    } catch (const ConfigError&) {
      throw DataError("corrupt header: '" + key + "' is not an integer");
    }
  };

  if (header_field(kDatasetMagic) != "1") throw DataError("corrupt header: unsupported version");
  DatasetHeader h;
  h.blob = header_field("blob");
  h.cases = header_size("cases");
  h.patches = header_size("patches");
  h.features = header_size("features");
  {
    std::string cols;
    if (!std::getline(in, cols) || cols != kDatasetColumns) {
      throw DataError("corrupt header: column line mismatch");
    }
  }
  if (h.patches < 1 || h.features < 1) throw DataError("corrupt header: zero dimension");
  const std::size_t target = target_patches.value_or(h.patches);

  const std::string blob = detail::read_file(manifest.parent_path() / h.blob);
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());

  std::vector<PatchBag> bags;
  bags.reserve(h.cases);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::vector<std::string> f;
    for (std::string tok; ls >> tok;) f.push_back(tok);
    const std::string id = f.empty() ? "?" : f[0];
    if (f.size() != 10) throw DataError("case " + id + ": expected 10 manifest fields");
    std::size_t m = 0, k = 0, off_high = 0, off_low = 0;
    try {
      m = KeyValues::to_size("patches", f[1]);
      k = KeyValues::to_size("features", f[2]);
      off_high = KeyValues::to_size("offset_high", f[8]);
      off_low = KeyValues::to_size("offset_low", f[9]);
    } catch (const ConfigError& e) {
      throw DataError("case " + id + ": " + e.what());
    }
    if (k != h.features) {
      throw DataError("case " + id + ": dimension mismatch, features " + std::to_string(k) +
                      " vs header " + std::to_string(h.features));
    }
    if (m < 1) throw DataError("case " + id + ": zero patches");
    PatchBag b;
    b.case_id = id;
    b.markers.idh_mut = detail::parse_binary(f[3], "idh_mut", id);
    b.markers.codel_1p19q = detail::parse_binary(f[4], "codel_1p19q", id);
    b.markers.cdkn_homdel = detail::parse_binary(f[5], "cdkn_homdel", id);
    b.markers.nmp = detail::parse_binary(f[6], "nmp", id);
    const int derived = derive_glioma_class(b.markers);
    if (f[7] == "-") {
      b.glioma_class = derived;
    } else if (f[7].size() == 1 && f[7][0] >= '0' && f[7][0] <= '3') {
      b.glioma_class = f[7][0] - '0';
      if (b.glioma_class != derived) {
        throw DataError("case " + id + ": glioma_class " + f[7] + " contradicts markers (derived " +
                        std::to_string(derived) + ")");
      }
    } else {
      throw DataError("case " + id + ": invalid glioma_class '" + f[7] + "'");
    }
    const std::size_t nbytes = m * k * 4;
    auto load = [&](std::size_t off) {
      if (off > blob.size() || blob.size() - off < nbytes) {
        throw DataError("case " + id + ": truncated blob (need " + std::to_string(nbytes) +
                        " bytes at offset " + std::to_string(off) + ", blob has " +
                        std::to_string(blob.size()) + ")");
      }
      grad::Tensor t(m, k);
      for (std::size_t i = 0; i < m * k; ++i) {
        const float v = detail::get_f32(bytes + off + 4 * i);
        if (!std::isfinite(v)) throw DataError("case " + id + ": non-finite feature value");
        t[i] = static_cast<double>(v);
      }
      return t;
    };
    b.feats_high = align_patch_count(load(off_high), target);
    b.feats_low = align_patch_count(load(off_low), target);
    bags.push_back(std::move(b));
  }
  if (bags.size() != h.cases) {
    throw DataError("corrupt header: declares " + std::to_string(h.cases) + " cases, found " +
                    std::to_string(bags.size()));
  }
  return bags;
}

inline std::array<std::size_t, 4> class_histogram(const std::vector<PatchBag>& bags) {
  std::array<std::size_t, 4> h{};
  for (const auto& b : bags) ++h[static_cast<std::size_t>(b.glioma_class)];
  return h;
}

}  // namespace m3c2

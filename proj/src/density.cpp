#include "cgc/density.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "cgc/error.hpp"
#include "cgc/rng.hpp"
#include "json.hpp"

namespace cgc::density {

using nlohmann::json;

void DensityParams::validate() const {
  if (!(tau_min > 0.0 && tau_min < 1.0)) throw InvalidArgument("tau_min must lie in (0,1)");
  double sum = 0.0;
  for (double a : alpha) {
    if (!(a > 0.0)) throw InvalidArgument("density weights must be positive");
    sum += a;
  }
  if (std::fabs(sum - 1.0) > 1e-9) throw InvalidArgument("density weights must sum to 1");
  if (!(gamma >= 1.0)) throw InvalidArgument("gamma must be >= 1");
  if (n_pairs < 1) throw InvalidArgument("n_pairs must be >= 1");
}

std::vector<double> activation_frequencies(const sae::FeatureMatrix& fm) {
  std::vector<std::size_t> counts(fm.cols(), 0);
  for (std::size_t r = 0; r < fm.rows(); ++r)
    for (int f : fm.row_indices(r)) ++counts[static_cast<std::size_t>(f)];
  std::vector<double> p(fm.cols(), 0.0);
  if (fm.rows() == 0) return p;
  for (std::size_t f = 0; f < p.size(); ++f) p[f] = static_cast<double>(counts[f]) / static_cast<double>(fm.rows());
  return p;
}

Breadth feature_breadth(const sae::FeatureMatrix& fm, double tau_min) {
  Breadth b;
  for (double p : activation_frequencies(fm)) b.count += p >= tau_min ? 1 : 0;
  b.normalized = fm.cols() ? static_cast<double>(b.count) / static_cast<double>(fm.cols()) : 0.0;
  return b;
}

Diversity feature_diversity(const sae::FeatureMatrix& fm) {
  const auto p = activation_frequencies(fm);
  double total = 0.0;
  for (double v : p) total += v;
  if (total <= 0.0) throw DegenerateComponent("no feature ever activates; entropy undefined");
  Diversity d;
  for (double v : p) {
    if (v <= 0.0) continue;
    const double q = v / total;
    d.entropy -= q * std::log(q);
  }
  d.entropy = std::max(0.0, d.entropy);
  // A one-feature dictionary has no room for diversity.
  d.normalized = fm.cols() > 1 ? std::clamp(d.entropy / std::log(static_cast<double>(fm.cols())), 0.0, 1.0) : 0.0;
  return d;
}

double jaccard(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t i = 0, j = 0, inter = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++inter;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  const std::size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double cross_consistency(const sae::FeatureMatrix& fm, const std::vector<std::pair<std::size_t, std::size_t>>& boundaries,
                         const std::vector<int>& categories, int n_pairs, std::uint64_t pair_seed,
                         Granularity granularity) {
  if (boundaries.size() != categories.size()) throw InvalidArgument("one category label per sequence required");
  if (n_pairs < 1) throw InvalidArgument("n_pairs must be >= 1");
  std::set<int> distinct(categories.begin(), categories.end());
  if (distinct.size() < 2) throw InvalidArgument("cross-input consistency needs at least two categories");

  std::vector<std::vector<int>> sets;
  std::vector<int> unit_cat;
  for (std::size_t s = 0; s < boundaries.size(); ++s) {
    const auto [b, e] = boundaries[s];
    if (e > fm.rows() || b > e) throw InvalidArgument("sequence boundary exceeds feature rows");
    if (granularity == Granularity::sequence) {
      std::vector<int> u;
      for (std::size_t r = b; r < e; ++r) {
        const auto idx = fm.row_indices(r);
        u.insert(u.end(), idx.begin(), idx.end());
      }
      std::sort(u.begin(), u.end());
      u.erase(std::unique(u.begin(), u.end()), u.end());
      sets.push_back(std::move(u));
      unit_cat.push_back(categories[s]);
    } else {
      for (std::size_t r = b; r < e; ++r) {
        const auto idx = fm.row_indices(r);
        sets.emplace_back(idx.begin(), idx.end());
        unit_cat.push_back(categories[s]);
      }
    }
  }

  const std::size_t n = sets.size();
  std::map<int, std::size_t> per_cat;
  for (int c : unit_cat) ++per_cat[c];
  std::size_t total = n * (n - 1) / 2;
  for (const auto& [c, cnt] : per_cat) total -= cnt * (cnt - 1) / 2;
  const auto want = static_cast<std::size_t>(n_pairs);

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  constexpr std::size_t kEnumerateLimit = 4'000'000;
  Rng rng(pair_seed);
  if (total <= kEnumerateLimit) {
    pairs.reserve(total);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (unit_cat[i] != unit_cat[j]) pairs.emplace_back(i, j);
    if (pairs.size() > want) {
      // Partial Fisher-Yates: the first `want` slots become a uniform sample.
      for (std::size_t i = 0; i < want; ++i) {
        const std::size_t j = i + rng.below(pairs.size() - i);
        std::swap(pairs[i], pairs[j]);
      }
      pairs.resize(want);
    }
  } else {
    std::set<std::pair<std::size_t, std::size_t>> seen;
    while (pairs.size() < want) {
      std::size_t i = rng.below(n);
      std::size_t j = rng.below(n);
      if (unit_cat[i] == unit_cat[j]) continue;
      if (i > j) std::swap(i, j);
      if (seen.insert({i, j}).second) pairs.emplace_back(i, j);
    }
  }

  double sum = 0.0;
  for (const auto& [i, j] : pairs) sum += jaccard(sets[i], sets[j]);
  return sum / static_cast<double>(pairs.size());
}

double capability_density(const SubMeasures& sub, const DensityParams& params) {
  const std::array<double, 3> x{sub.breadth.normalized, sub.diversity.normalized, sub.consistency};
  double delta = 1.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) return 0.0;
    delta *= std::pow(std::pow(std::min(x[i], 1.0), 1.0 / params.gamma), params.alpha[i]);
  }
  return std::clamp(delta, 0.0, 1.0);
}

const DensityRecord& DensityMap::at(const lm::ComponentId& c) const {
  for (const auto& r : records)
    if (r.component == c) return r;
  throw InvalidArgument("component " + c.label() + " not in density map");
}

std::vector<double> DensityMap::deltas() const {
  std::vector<double> out;
  for (const auto& r : records) out.push_back(r.delta);
  return out;
}

Summary summarize(const std::vector<DensityRecord>& records) {
  Summary s;
  if (records.empty()) return s;
  s.min = records.front().delta;
  s.max = records.front().delta;
  s.argmin = s.argmax = records.front().component;
  double sum = 0.0;
  for (const auto& r : records) {
    sum += r.delta;
    if (r.delta < s.min) {
      s.min = r.delta;
      s.argmin = r.component;
    }
    if (r.delta > s.max) {
      s.max = r.delta;
      s.argmax = r.component;
    }
  }
  s.mean = sum / static_cast<double>(records.size());
  return s;
}

DensityMap build_density_map(const lm::ActivationDump& dump, const sae::SaeBank& bank, const DensityParams& params) {
  params.validate();
  DensityMap map;
  map.params = params;
  map.dump_fingerprint = dump.corpus_fingerprint;
  std::vector<lm::ComponentId> comps;
  for (const auto& e : dump.manifest) comps.push_back(e.component);
  std::sort(comps.begin(), comps.end());
  for (const auto& c : comps) {
    const auto it = bank.find(c);
    if (it == bank.end()) throw InvalidArgument("missing SAE for component " + c.label());
    const auto fm = sae::encode(it->second.sae, dump.matrix(c), it->second.config.k);
    DensityRecord rec;
    rec.component = c;
    rec.sub.breadth = feature_breadth(fm, params.tau_min);
    try {
      rec.sub.diversity = feature_diversity(fm);
    } catch (const DegenerateComponent&) {
      rec.degenerate = true;
      map.warnings.push_back(c.label() + ": no feature ever activates; density set to 0");
    }
    rec.sub.consistency = cross_consistency(fm, dump.sequence_boundaries, dump.category_labels, params.n_pairs,
                                            params.pair_seed, params.granularity);
    rec.delta = rec.degenerate ? 0.0 : capability_density(rec.sub, params);
    map.records.push_back(rec);
  }
  map.summary = summarize(map.records);
  return map;
}

namespace {

json params_json(const DensityParams& p) {
  return {{"tau_min", p.tau_min},
          {"alpha", p.alpha},
          {"gamma", p.gamma},
          {"n_pairs", p.n_pairs},
          {"pair_seed", p.pair_seed},
          {"granularity", p.granularity == Granularity::sequence ? "sequence" : "token"}};
}

}  // namespace

std::string to_json(const DensityMap& map) {
  json records = json::array();
  for (const auto& r : map.records) {
    records.push_back({{"component", r.component.label()},
                       {"layer", r.component.layer},
                       {"head", r.component.head},
                       {"beta", r.sub.breadth.count},
                       {"beta_norm", r.sub.breadth.normalized},
                       {"entropy", r.sub.diversity.entropy},
                       {"entropy_norm", r.sub.diversity.normalized},
                       {"psi", r.sub.consistency},
                       {"delta", r.delta},
                       {"degenerate", r.degenerate}});
  }
  json out = {{"params", params_json(map.params)},
              {"records", records},
              {"dump_fingerprint", map.dump_fingerprint},
              {"warnings", map.warnings},
              {"summary",
               {{"mean", map.summary.mean},
                {"min", map.summary.min},
                {"max", map.summary.max},
                {"argmin", map.summary.argmin.label()},
                {"argmax", map.summary.argmax.label()}}}};
  return out.dump(2) + "\n";
}

std::string to_csv(const DensityMap& map) {
  std::ostringstream os;
  os.precision(17);
  os << "layer,head,beta,H,psi,delta\n";
  for (const auto& r : map.records) {
    os << r.component.layer << ',' << r.component.head << ',' << r.sub.breadth.count << ','
       << r.sub.diversity.entropy << ',' << r.sub.consistency << ',' << r.delta << '\n';
  }
  return os.str();
}

DensityMap from_json(const std::string& text) {
  DensityMap map;
  try {
    const auto j = json::parse(text);
    const auto& p = j.at("params");
    map.params.tau_min = p.at("tau_min");
    map.params.alpha = p.at("alpha").get<std::array<double, 3>>();
    map.params.gamma = p.at("gamma");
    map.params.n_pairs = p.at("n_pairs");
    map.params.pair_seed = p.at("pair_seed");
    map.params.granularity = p.at("granularity") == "token" ? Granularity::token : Granularity::sequence;
    map.dump_fingerprint = j.at("dump_fingerprint");
    map.warnings = j.at("warnings").get<std::vector<std::string>>();
    for (const auto& r : j.at("records")) {
      DensityRecord rec;
      rec.component = lm::ComponentId::parse(r.at("component"));
      rec.sub.breadth.count = r.at("beta");
      rec.sub.breadth.normalized = r.at("beta_norm");
      rec.sub.diversity.entropy = r.at("entropy");
      rec.sub.diversity.normalized = r.at("entropy_norm");
      rec.sub.consistency = r.at("psi");
      rec.delta = r.at("delta");
      rec.degenerate = r.at("degenerate");
      map.records.push_back(rec);
    }
  } catch (const std::exception& e) {
    throw ArtifactError(std::string("malformed density map: ") + e.what());
  }
  map.summary = summarize(map.records);
  return map;
}

}  // namespace cgc::density

#include "cgc/importance.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cgc/error.hpp"
#include "json.hpp"

namespace cgc::importance {

using nlohmann::json;

Eigen::MatrixXd wanda_scores(const Eigen::MatrixXd& w, std::span<const double> act_norms) {
  if (static_cast<std::size_t>(w.cols()) != act_norms.size()) {
    throw InvalidArgument("wanda: one activation norm per input column required");
  }
  Eigen::MatrixXd out(w.rows(), w.cols());
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) out(i, j) = std::fabs(w(i, j)) * act_norms[static_cast<std::size_t>(j)];
  return out;
}

std::vector<double> column_norms(const Eigen::Map<const Tensor>& acts) {
  std::vector<double> out(static_cast<std::size_t>(acts.cols()), 0.0);
  for (Eigen::Index r = 0; r < acts.rows(); ++r)
    for (Eigen::Index c = 0; c < acts.cols(); ++c) {
      const double v = acts(r, c);
      out[static_cast<std::size_t>(c)] += v * v;
    }
  for (auto& v : out) v = std::sqrt(v);
  return out;
}

double head_wanda(const lm::Checkpoint& ckpt, const lm::ActivationDump& dump, const lm::ComponentId& c,
                  Aggregation agg) {
  if (!dump.contains(c)) throw InvalidArgument("component " + c.label() + " missing from activation dump");
  const auto norms = column_norms(dump.matrix(c));
  // The slice is d_head x d_model (input rows); Wanda indexes input columns.
  const Eigen::MatrixXd w = ckpt.head_slice(c).cast<double>().transpose();
  const auto scores = wanda_scores(w, norms);
  return agg == Aggregation::mean ? scores.mean() : scores.sum();
}

double head_magnitude(const lm::Checkpoint& ckpt, const lm::ComponentId& c) {
  return ckpt.head_slice(c).cast<double>().cwiseAbs().mean();
}

AblationResult ablation_scan(const lm::Checkpoint& ckpt, std::span<const int> eval_stream, int chunk_len, int n_chunks,
                             const std::vector<lm::ComponentId>& components) {
  AblationResult out;
  out.baseline_ppl = lm::evaluate_ppl(ckpt, eval_stream, chunk_len, n_chunks);
  for (const auto& c : components) {
    const auto ablated = lm::ablate_head(ckpt, c);
    const double ppl = lm::evaluate_ppl(ablated, eval_stream, chunk_len, n_chunks);
    out.components.push_back(c);
    out.ablated_ppl.push_back(ppl);
    out.delta_ppl.push_back(ppl - out.baseline_ppl);
  }
  return out;
}

std::vector<double> ImportanceMap::wanda() const {
  std::vector<double> out;
  for (const auto& r : records) out.push_back(r.wanda);
  return out;
}

std::vector<double> ImportanceMap::ablation() const {
  std::vector<double> out;
  for (const auto& r : records) out.push_back(r.ablation_dppl);
  return out;
}

ImportanceMap build_importance(const lm::Checkpoint& ckpt, const lm::ActivationDump& dump, Aggregation agg) {
  ImportanceMap map;
  map.aggregation = agg;
  std::vector<lm::ComponentId> comps;
  for (const auto& e : dump.manifest) comps.push_back(e.component);
  std::sort(comps.begin(), comps.end());
  for (const auto& c : comps) {
    ImportanceRecord r;
    r.component = c;
    r.wanda = head_wanda(ckpt, dump, c, agg);
    r.magnitude = head_magnitude(ckpt, c);
    map.records.push_back(r);
  }
  return map;
}

void attach_ablation(ImportanceMap& map, const AblationResult& scan) {
  map.baseline_ppl = scan.baseline_ppl;
  for (auto& r : map.records) {
    for (std::size_t i = 0; i < scan.components.size(); ++i) {
      if (scan.components[i] == r.component) {
        r.ablation_dppl = scan.delta_ppl[i];
        r.has_ablation = true;
      }
    }
  }
}

std::string to_json(const ImportanceMap& map) {
  json records = json::array();
  for (const auto& r : map.records) {
    json rec = {{"component", r.component.label()},
                {"layer", r.component.layer},
                {"head", r.component.head},
                {"wanda", r.wanda},
                {"magnitude", r.magnitude}};
    rec["ablation_dppl"] = r.has_ablation ? json(r.ablation_dppl) : json(nullptr);
    records.push_back(rec);
  }
  const json out = {{"aggregation", map.aggregation == Aggregation::mean ? "mean" : "sum"},
                    {"baseline_ppl", map.baseline_ppl},
                    {"records", records}};
  return out.dump(2) + "\n";
}

std::string to_csv(const ImportanceMap& map) {
  std::ostringstream os;
  os.precision(17);
  os << "layer,head,wanda,magnitude,ablation_dppl\n";
  for (const auto& r : map.records) {
    os << r.component.layer << ',' << r.component.head << ',' << r.wanda << ',' << r.magnitude << ',';
    if (r.has_ablation) os << r.ablation_dppl;
    os << '\n';
  }
  return os.str();
}

ImportanceMap from_json(const std::string& text) {
  ImportanceMap map;
  try {
    const auto j = json::parse(text);
    map.aggregation = j.at("aggregation") == "sum" ? Aggregation::sum : Aggregation::mean;
    map.baseline_ppl = j.at("baseline_ppl");
    for (const auto& r : j.at("records")) {
      ImportanceRecord rec;
      rec.component = lm::ComponentId::parse(r.at("component"));
      rec.wanda = r.at("wanda");
      rec.magnitude = r.at("magnitude");
      if (!r.at("ablation_dppl").is_null()) {
        rec.ablation_dppl = r.at("ablation_dppl");
        rec.has_ablation = true;
      }
      map.records.push_back(rec);
    }
  } catch (const std::exception& e) {
    throw ArtifactError(std::string("malformed importance map: ") + e.what());
  }
  return map;
}

std::string ablation_csv(const AblationResult& scan) {
  std::ostringstream os;
  os.precision(17);
  os << "layer,head,baseline_ppl,ablated_ppl,delta_ppl\n";
  for (std::size_t i = 0; i < scan.components.size(); ++i) {
    os << scan.components[i].layer << ',' << scan.components[i].head << ',' << scan.baseline_ppl << ','
       << scan.ablated_ppl[i] << ',' << scan.delta_ppl[i] << '\n';
  }
  return os.str();
}

}  // namespace cgc::importance

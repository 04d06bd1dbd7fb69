#include "cgc/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "cgc/corpus.hpp"
#include "cgc/error.hpp"
#include "cgc/hash.hpp"
#include "cgc/importance.hpp"
#include "cgc/rng.hpp"
#include "cgc/stats.hpp"
#include "json.hpp"

namespace cgc::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::pair<std::string, std::string>> kDefaults = {
    {"config_version", "1"},
    {"preset", "desk"},
    {"seed", "42"},
    {"workdir", "work"},
    {"corpus.path", ""},
    {"corpus.bytes", "1100000"},
    {"corpus.shards", "4"},
    {"corpus.holdout", "0.1"},
    {"model.n_layers", "4"},
    {"model.n_heads", "8"},
    {"model.d_head", "16"},
    {"model.d_ffn", "512"},
    {"model.context_len", "128"},
    {"train.steps", "600"},
    {"train.batch_size", "16"},
    {"train.lr", "0.003"},
    {"train.min_lr_ratio", "0.1"},
    {"train.warmup", "30"},
    {"train.weight_decay", "0.01"},
    {"train.grad_clip", "1.0"},
    {"calib.n_seq", "64"},
    {"calib.seq_len", "128"},
    {"eval.n_chunks", "16"},
    {"eval.chunk_len", "128"},
    {"sae.dict_size", "128"},
    {"sae.k", "8"},
    {"sae.l1", "0.0001"},
    {"sae.lr", "0.0002"},
    {"sae.epochs", "5"},
    {"sae.batch_size", "64"},
    {"density.tau_min", "0.01"},
    {"density.gamma", "2"},
    {"density.alpha", "equal"},
    {"density.n_pairs", "256"},
    {"density.pair_seed", "7"},
    {"density.granularity", "sequence"},
    {"importance.aggregation", "mean"},
    {"alloc.rho", "0.5"},
    {"alloc.rho_min", "0.2"},
    {"alloc.rho_max", "1.0"},
    {"alloc.grid_steps", "16"},
    {"alloc.transfer", "concave"},
    {"alloc.gamma", "2"},
    {"evo.population", "16"},
    {"evo.generations", "50"},
    {"evo.mutations", "2"},
    {"evo.elite", "2"},
    {"evo.fitness_sample", "8"},
    {"sim.d", "64"},
    {"sim.f", "128"},
    {"sim.s", "0.5"},
    {"sim.eta", "0.5"},
    {"sim.trials", "2000"},
    {"sim.zipf_levels", "0,0.5,1,1.5,2.5"},
    {"sim.s_grid", "0,0.25,0.5,0.75,1"},
    {"sim.eta_sweep", "0.25,0.5,0.75"},
    {"sim.k", "8"},
    {"sim.rho", "0.5"},
    {"sim.entropy_low", "0.2"},
    {"sim.entropy_high", "1.0"},
    {"sim.control_entropy", "0.6"},
    {"sim.direction_model", "isotropic"},
    {"sim.weighting", "activity"},
};

const std::vector<std::string> kSeedNames = {"corpus", "init", "train", "calib", "sae", "evo", "sim"};
const std::vector<std::string> kMethods = {"uniform", "cgc-l", "cgc-f", "inverted"};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ArtifactError("cannot write " + path.string());
  os << text;
  if (!os) throw ArtifactError("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArtifactError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string file_hash(const fs::path& path) { return hex64(Fnv1a().update(read_text(path)).digest()); }

std::string fixed(double x, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

enum class Kind { checkpoint, dump, bank, json };

class Runner {
 public:
  Runner(PipelineConfig config, bool force, std::ostream& out, std::ostream& err)
      : config_(std::move(config)), force_(force), out_(out), err_(err), workdir_(config_.get("workdir")) {
    fs::create_directories(workdir_);
  }

  int run(const std::string& name, const std::string& method, const std::string& checkpoint);

 private:
  fs::path path(const std::string& name) const { return workdir_ / name; }

  const std::vector<int>& tokens() {
    if (!tokens_) {
      const auto& p = config_.get("corpus.path");
      const std::string text =
          p.empty() ? corpus::generate(static_cast<std::size_t>(config_.integer("corpus.bytes")), config_.seed("corpus"))
                    : corpus::read_file(p);
      tokens_ = corpus::tokenize(text);
      corpus_fp_ = corpus::fingerprint(*tokens_);
    }
    return *tokens_;
  }
  std::uint64_t corpus_fp() {
    tokens();
    return corpus_fp_;
  }
  corpus::Layout layout() {
    return corpus::layout(tokens().size(), static_cast<int>(config_.integer("corpus.shards")),
                          config_.real("corpus.holdout"));
  }

  // Hash of upstream fingerprints plus every config key under the prefixes.
  std::string fingerprint(const std::vector<std::string>& parts, const std::vector<std::string>& prefixes) const {
    Fnv1a h;
    for (const auto& p : parts) h.update(p).update("\n");
    for (const auto& [k, v] : config_.values()) {
      for (const auto& prefix : prefixes) {
        if (k == prefix || k.rfind(prefix + ".", 0) == 0) {
          h.update(k).update("=").update(v).update("\n");
          break;
        }
      }
    }
    return hex64(h.digest());
  }

  std::string fp_lm() { return fingerprint({"lm", hex64(corpus_fp())}, {"corpus", "model", "train", "seed"}); }
  std::string fp_acts() { return fingerprint({"acts", fp_lm()}, {"calib"}); }
  std::string fp_sae() { return fingerprint({"sae", fp_acts()}, {"sae"}); }
  std::string fp_density() { return fingerprint({"density", fp_sae()}, {"density"}); }
  std::string fp_wanda() { return fingerprint({"wanda", fp_acts()}, {"importance"}); }
  std::string fp_ablation() { return fingerprint({"ablation", fp_lm()}, {"eval"}); }
  std::string fp_alloc(const std::string& m) {
    if (m == "cgc-f") return fingerprint({"alloc", m, fp_density(), fp_acts()}, {"alloc", "evo"});
    return fingerprint({"alloc", m, fp_density()}, {"alloc"});
  }
  std::string fp_prune(const std::string& m) { return fingerprint({"prune", m, fp_alloc(m), fp_lm()}, {}); }
  std::string fp_correlate() {
    const std::string abl = fresh(path("ablation.json"), Kind::json, fp_ablation()) ? fp_ablation() : "none";
    return fingerprint({"correlate", fp_density(), fp_wanda(), abl}, {});
  }
  std::string fp_sim() { return fingerprint({"sim"}, {"sim", "seed"}); }

  json provenance(const std::string& fp, bool with_corpus) {
    json p = {{"fingerprint", fp}, {"config_version", kConfigVersion}};
    if (with_corpus) p["corpus_fingerprint"] = hex64(corpus_fp());
    json seeds = json::object();
    for (const auto& [k, v] : config_.seeds()) seeds[k] = v;
    p["seeds"] = seeds;
    p["base_seed"] = config_.integer("seed");
    return p;
  }
  std::string extra(const std::string& fp, json more = json::object()) {
    more["provenance"] = provenance(fp, true);
    return more.dump();
  }
  std::string with_provenance(const std::string& body, const std::string& fp, bool with_corpus = true) {
    json j = json::parse(body);
    j["provenance"] = provenance(fp, with_corpus);
    return j.dump(2) + "\n";
  }

  static std::optional<json> stored_provenance(const fs::path& p, Kind kind) {
    if (!fs::exists(p)) return std::nullopt;
    try {
      json j;
      switch (kind) {
        case Kind::checkpoint: j = json::parse(lm::load_checkpoint_extra(p.string())); break;
        case Kind::dump: j = json::parse(lm::load_dump_extra(p.string())); break;
        case Kind::bank: j = json::parse(sae::load_bank_extra(p.string())); break;
        case Kind::json: j = json::parse(read_text(p)); break;
      }
      if (!j.contains("provenance")) return std::nullopt;
      return j.at("provenance");
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }
  static bool fresh(const fs::path& p, Kind kind, const std::string& fp) {
    const auto prov = stored_provenance(p, kind);
    return prov && prov->value("fingerprint", "") == fp;
  }
  bool skip(const std::string& stage, const fs::path& p, Kind kind, const std::string& fp) {
    if (force_ || !fresh(p, kind, fp)) return false;
    out_ << stage << ": up to date (" << p.filename().string() << ")\n";
    return true;
  }
  void require(const fs::path& p, Kind kind, const std::string& fp, const std::string& producer) {
    if (!fs::exists(p)) {
      throw ArtifactError("missing upstream artifact " + p.filename().string() + " (run '" + producer + "')");
    }
    if (!fresh(p, kind, fp)) {
      throw ArtifactError("stale artifact " + p.filename().string() +
                          ": its fingerprint does not match the current config (re-run '" + producer + "')");
    }
  }

  lm::Checkpoint load_lm() {
    require(path("lm.ckpt"), Kind::checkpoint, fp_lm(), "train-lm");
    return lm::load_checkpoint(path("lm.ckpt").string());
  }
  lm::ActivationDump load_acts() {
    require(path("acts.cgca"), Kind::dump, fp_acts(), "dump-acts");
    auto dump = lm::load_dump(path("acts.cgca").string());
    if (dump.corpus_fingerprint != corpus_fp()) throw ArtifactError("activation dump was built from another corpus");
    return dump;
  }
  density::DensityMap load_density() {
    require(path("density.json"), Kind::json, fp_density(), "density");
    return density::from_json(read_text(path("density.json")));
  }

  // n_chunks chunks spread over the held-out tail of each shard.
  std::vector<int> eval_stream() {
    const auto n_chunks = static_cast<int>(config_.integer("eval.n_chunks"));
    const auto len = static_cast<std::size_t>(config_.integer("eval.chunk_len"));
    const auto held = layout().heldout;
    const int per = n_chunks / static_cast<int>(held.size());
    const int rem = n_chunks % static_cast<int>(held.size());
    std::vector<int> out;
    for (std::size_t r = 0; r < held.size(); ++r) {
      const auto count = static_cast<std::size_t>(per + (static_cast<int>(r) < rem ? 1 : 0));
      const auto [b, e] = held[r];
      if (count * len > e - b) throw InvalidArgument("held-out shard too small for the requested evaluation chunks");
      out.insert(out.end(), tokens().begin() + static_cast<std::ptrdiff_t>(b),
                 tokens().begin() + static_cast<std::ptrdiff_t>(b + count * len));
    }
    return out;
  }
  double eval_ppl(const lm::Checkpoint& ckpt) {
    return lm::evaluate_ppl(ckpt, eval_stream(), static_cast<int>(config_.integer("eval.chunk_len")),
                            static_cast<int>(config_.integer("eval.n_chunks")));
  }

  alloc::AllocationProblem problem(const density::DensityMap& map) {
    const auto mc = config_.model();
    auto p = config_.problem_template();
    const auto heads = lm::head_components(mc);
    for (const auto& c : heads) {
      p.sizes.push_back(static_cast<std::size_t>(mc.d_head) * static_cast<std::size_t>(mc.d_model()));
      p.density.push_back(map.at(c).delta);
    }
    return p;
  }
  std::vector<std::string> head_labels() {
    std::vector<std::string> out;
    for (const auto& c : lm::head_components(config_.model())) out.push_back(c.label());
    return out;
  }

  int make_corpus();
  int train_lm();
  int eval_ppl_cmd(const std::string& checkpoint);
  int dump_acts();
  int train_saes();
  int density_cmd();
  int wanda();
  int ablate_scan();
  int correlate();
  int allocate(const std::string& method);
  int prune(const std::string& method);
  int report();
  int simulate();

  PipelineConfig config_;
  bool force_;
  std::ostream& out_;
  std::ostream& err_;
  fs::path workdir_;
  std::optional<std::vector<int>> tokens_;
  std::uint64_t corpus_fp_ = 0;
};

int Runner::run(const std::string& name, const std::string& method, const std::string& checkpoint) {
  if (name == "show-config") {
    out_ << config_.to_text();
    return exit_code::ok;
  }
  if (name == "make-corpus") return make_corpus();
  if (name == "train-lm") return train_lm();
  if (name == "eval-ppl") return eval_ppl_cmd(checkpoint);
  if (name == "dump-acts") return dump_acts();
  if (name == "train-saes") return train_saes();
  if (name == "density") return density_cmd();
  if (name == "wanda") return wanda();
  if (name == "ablate-scan") return ablate_scan();
  if (name == "correlate") return correlate();
  if (name == "allocate") return allocate(method);
  if (name == "prune") return prune(method);
  if (name == "report") return report();
  if (name == "simulate-theorems") return simulate();
  throw UsageError("unknown subcommand " + name);
}

int Runner::make_corpus() {
  const auto& toks = tokens();
  std::string text(toks.size(), '\0');
  std::transform(toks.begin(), toks.end(), text.begin(), [](int t) { return static_cast<char>(t); });
  write_text(path("corpus.txt"), text);
  out_ << "make-corpus: " << toks.size() << " bytes, fingerprint " << hex64(corpus_fp()) << "\n";
  return exit_code::ok;
}

int Runner::train_lm() {
  const auto fp = fp_lm();
  if (skip("train-lm", path("lm.ckpt"), Kind::checkpoint, fp)) return exit_code::ok;
  const auto mc = config_.model();
  const auto hyper = config_.train();
  if (tokens().size() < 2 * static_cast<std::size_t>(mc.context_len)) throw InvalidArgument("corpus too short");
  lm::TrainLog log;
  auto progress = [&](int step, double loss) {
    if (step % 50 == 0 || step + 1 == hyper.steps) err_ << "  step " << step << " loss " << fixed(loss, 4) << "\n";
  };
  const auto ckpt = lm::train_lm(tokens(), layout().train, mc, hyper, config_.seed("train"), &log, progress);
  lm::save_checkpoint(ckpt, path("lm.ckpt").string(), extra(fp, {{"parameters", ckpt.parameter_count()}}));
  std::ostringstream csv;
  csv.precision(9);
  csv << "step,loss\n";
  for (std::size_t i = 0; i < log.step_loss.size(); ++i) csv << i << ',' << log.step_loss[i] << '\n';
  write_text(path("train_log.csv"), csv.str());
  out_ << "train-lm: " << hyper.steps << " steps, final loss "
       << fixed(log.step_loss.empty() ? 0.0 : log.step_loss.back(), 4) << ", wrote lm.ckpt\n";
  return exit_code::ok;
}

int Runner::eval_ppl_cmd(const std::string& checkpoint) {
  if (checkpoint.empty()) {
    const auto fp = fingerprint({"eval-ppl", fp_lm()}, {"eval"});
    if (skip("eval-ppl", path("eval_ppl.json"), Kind::json, fp)) return exit_code::ok;
    const double ppl = eval_ppl(load_lm());
    const json j = {{"checkpoint", "lm.ckpt"}, {"ppl", ppl}};
    write_text(path("eval_ppl.json"), with_provenance(j.dump(), fp));
    out_ << "ppl " << fixed(ppl) << "\n";
    return exit_code::ok;
  }
  const fs::path p = fs::path(checkpoint).is_absolute() || fs::exists(checkpoint) ? fs::path(checkpoint) : path(checkpoint);
  if (!fs::exists(p)) throw ArtifactError("missing checkpoint " + p.string());
  const auto prov = stored_provenance(p, Kind::checkpoint);
  if (prov && prov->value("corpus_fingerprint", hex64(corpus_fp())) != hex64(corpus_fp())) {
    throw ArtifactError("checkpoint " + p.filename().string() + " was trained on another corpus");
  }
  out_ << "ppl " << fixed(eval_ppl(lm::load_checkpoint(p.string()))) << "\n";
  return exit_code::ok;
}

int Runner::dump_acts() {
  const auto fp = fp_acts();
  if (skip("dump-acts", path("acts.cgca"), Kind::dump, fp)) return exit_code::ok;
  const auto ckpt = load_lm();
  const auto seq_len = static_cast<int>(config_.integer("calib.seq_len"));
  const auto sample = lm::sample_calibration(layout().train, static_cast<int>(config_.integer("calib.n_seq")), seq_len,
                                             config_.seed("calib"));
  auto dump = lm::capture_activations(ckpt, tokens(), sample, seq_len, lm::head_components(ckpt.config));
  dump.corpus_fingerprint = corpus_fp();
  lm::save_dump(dump, path("acts.cgca").string(), extra(fp));
  out_ << "dump-acts: " << dump.manifest.size() << " heads x " << dump.rows() << " rows, wrote acts.cgca\n";
  return exit_code::ok;
}

int Runner::train_saes() {
  const auto fp = fp_sae();
  if (skip("train-saes", path("saes.cgcs"), Kind::bank, fp)) return exit_code::ok;
  const auto dump = load_acts();
  sae::SaeBank bank;
  int improved = 0;
  std::uint64_t index = 0;
  for (const auto& entry : dump.manifest) {
    auto cfg = config_.sae(static_cast<int>(entry.cols));
    cfg.seed = config_.seed("sae") ^ index++;
    auto [model, stats] = sae::train_sae(dump.matrix(entry.component), cfg);
    if (stats.epoch_loss.back() < stats.epoch_loss.front()) ++improved;
    err_ << "  " << entry.component.label() << " loss " << fixed(stats.epoch_loss.front(), 5) << " -> "
         << fixed(stats.epoch_loss.back(), 5) << ", dead " << stats.dead_features << "\n";
    bank.emplace(entry.component, sae::BankEntry{cfg, std::move(model), std::move(stats)});
  }
  sae::save_bank(bank, path("saes.cgcs").string(), extra(fp));
  write_text(path("sae_stats.json"), with_provenance(sae::stats_json(bank), fp));
  out_ << "train-saes: " << bank.size() << " SAEs, final loss below initial for " << improved << "/" << bank.size()
       << ", wrote saes.cgcs\n";
  return exit_code::ok;
}

int Runner::density_cmd() {
  const auto fp = fp_density();
  if (skip("density", path("density.json"), Kind::json, fp)) return exit_code::ok;
  const auto dump = load_acts();
  require(path("saes.cgcs"), Kind::bank, fp_sae(), "train-saes");
  const auto bank = sae::load_bank(path("saes.cgcs").string());
  const auto map = density::build_density_map(dump, bank, config_.density());
  for (const auto& w : map.warnings) err_ << "  warning: " << w << "\n";
  write_text(path("density.json"), with_provenance(density::to_json(map), fp));
  write_text(path("density.csv"), density::to_csv(map));
  out_ << "density: " << map.records.size() << " heads, mean " << fixed(map.summary.mean, 4) << ", min "
       << fixed(map.summary.min, 4) << " (" << map.summary.argmin.label() << "), max " << fixed(map.summary.max, 4)
       << " (" << map.summary.argmax.label() << ")\n";
  return exit_code::ok;
}

int Runner::wanda() {
  const auto fp = fp_wanda();
  if (skip("wanda", path("importance.json"), Kind::json, fp)) return exit_code::ok;
  const auto ckpt = load_lm();
  const auto dump = load_acts();
  const auto agg = config_.get("importance.aggregation") == "sum" ? importance::Aggregation::sum
                                                                   : importance::Aggregation::mean;
  const auto map = importance::build_importance(ckpt, dump, agg);
  write_text(path("importance.json"), with_provenance(importance::to_json(map), fp));
  write_text(path("importance.csv"), importance::to_csv(map));
  out_ << "wanda: " << map.records.size() << " heads, wrote importance.json\n";
  return exit_code::ok;
}

int Runner::ablate_scan() {
  const auto fp = fp_ablation();
  if (skip("ablate-scan", path("ablation.json"), Kind::json, fp)) return exit_code::ok;
  const auto ckpt = load_lm();
  const auto scan = importance::ablation_scan(ckpt, eval_stream(), static_cast<int>(config_.integer("eval.chunk_len")),
                                              static_cast<int>(config_.integer("eval.n_chunks")),
                                              lm::head_components(ckpt.config));
  json heads = json::array();
  for (std::size_t i = 0; i < scan.components.size(); ++i) {
    heads.push_back({{"component", scan.components[i].label()},
                     {"ablated_ppl", scan.ablated_ppl[i]},
                     {"delta_ppl", scan.delta_ppl[i]}});
  }
  const json j = {{"baseline_ppl", scan.baseline_ppl}, {"heads", heads}};
  write_text(path("ablation.json"), with_provenance(j.dump(), fp));
  write_text(path("ablation.csv"), importance::ablation_csv(scan));
  out_ << "ablate-scan: baseline ppl " << fixed(scan.baseline_ppl) << ", " << scan.components.size() << " heads\n";
  return exit_code::ok;
}

int Runner::correlate() {
  const auto fp = fp_correlate();
  if (skip("correlate", path("correlation.json"), Kind::json, fp)) return exit_code::ok;
  const auto dmap = load_density();
  require(path("importance.json"), Kind::json, fp_wanda(), "wanda");
  const auto imap = importance::from_json(read_text(path("importance.json")));
  const auto delta = dmap.deltas();
  std::vector<double> magnitude;
  for (const auto& r : imap.records) magnitude.push_back(r.magnitude);

  auto pair = [](const std::vector<double>& x, const std::vector<double>& y) {
    json j;
    try {
      j["spearman"] = json::parse(stats::to_json(stats::spearman(x, y)));
      j["pearson"] = json::parse(stats::to_json(stats::pearson(x, y)));
    } catch (const InvalidArgument& e) {
      j = {{"error", e.what()}};
    }
    return j;
  };
  json out = {{"density_vs_wanda", pair(delta, imap.wanda())}, {"density_vs_magnitude", pair(delta, magnitude)}};
  if (fresh(path("ablation.json"), Kind::json, fp_ablation())) {
    const auto abl = json::parse(read_text(path("ablation.json")));
    std::vector<double> dppl;
    for (const auto& h : abl.at("heads")) dppl.push_back(h.at("delta_ppl"));
    out["density_vs_ablation"] = pair(delta, dppl);
    out["wanda_vs_ablation"] = pair(imap.wanda(), dppl);
  }
  out["n"] = delta.size();
  write_text(path("correlation.json"), with_provenance(out.dump(), fp));
  const auto& dw = out["density_vs_wanda"];
  if (dw.contains("spearman")) {
    out_ << "correlate: spearman(density, wanda) rho " << fixed(dw["spearman"]["coefficient"].get<double>(), 4)
         << " p " << fixed(dw["spearman"]["p_value"].get<double>(), 4) << "\n";
  } else {
    out_ << "correlate: density vs wanda undefined: " << dw["error"].get<std::string>() << "\n";
  }
  return exit_code::ok;
}

int Runner::allocate(const std::string& method) {
  const auto fp = fp_alloc(method);
  const auto file = path("alloc_" + method + ".json");
  if (skip("allocate " + method, file, Kind::json, fp)) return exit_code::ok;
  const auto dmap = load_density();
  const auto prob = problem(dmap);
  alloc::Allocation a;
  if (method == "uniform") {
    a = alloc::uniform_alloc(prob);
  } else if (method == "cgc-l") {
    a = alloc::cgc_l(prob);
  } else if (method == "inverted") {
    a = alloc::inverted_alloc(prob);
  } else if (method == "cgc-f") {
    const auto ckpt = load_lm();
    const auto dump = load_acts();
    auto evo = config_.evo();
    const auto seq_len = static_cast<int>(config_.integer("calib.seq_len"));
    const std::size_t n_seq = dump.sequence_starts.size();
    const auto n_fit = std::min<std::size_t>(static_cast<std::size_t>(evo.fitness_sample), n_seq);
    std::vector<int> sample;
    for (std::size_t i = 0; i < n_fit; ++i) {
      const auto start = dump.sequence_starts[i * n_seq / n_fit];
      sample.insert(sample.end(), tokens().begin() + static_cast<std::ptrdiff_t>(start),
                    tokens().begin() + static_cast<std::ptrdiff_t>(start) + seq_len);
    }
    auto fitness = [&](const std::vector<double>& retention) {
      const auto pruned = lm::apply_prune(ckpt, lm::PruneSpec{retention, lm::PruneCriterion::magnitude});
      return lm::sequence_nll(pruned, sample, static_cast<int>(n_fit), seq_len).mean();
    };
    std::size_t evals = 0;
    a = alloc::cgc_f(prob, alloc::cgc_l(prob), evo, fitness, [&](const alloc::Allocation&) { ++evals; });
    err_ << "  cgc-f: " << evals << " fitness evaluations, " << fixed(a.fitness_trace.front(), 5) << " -> "
         << fixed(a.fitness_trace.back(), 5) << "\n";
    write_text(path("alloc_cgc-f_trace.csv"), alloc::trace_csv(a));
  } else {
    throw UsageError("unknown allocation method " + method);
  }
  write_text(file, with_provenance(alloc::to_json(a, prob, head_labels()), fp));
  const auto [lo, hi] = std::minmax_element(a.retention.begin(), a.retention.end());
  out_ << "allocate " << method << ": achieved ratio " << fixed(a.achieved_ratio, 4) << ", retention range ["
       << fixed(*lo, 4) << ", " << fixed(*hi, 4) << "], wrote " << file.filename().string() << "\n";
  return exit_code::ok;
}

int Runner::prune(const std::string& method) {
  std::vector<std::string> methods;
  if (method == "all") {
    for (const auto& m : kMethods)
      if (fs::exists(path("alloc_" + m + ".json"))) methods.push_back(m);
    if (methods.empty()) throw ArtifactError("missing upstream artifact alloc_<method>.json (run 'allocate')");
  } else {
    methods.push_back(method);
  }
  std::optional<lm::Checkpoint> ckpt;
  for (const auto& m : methods) {
    const auto fp = fp_prune(m);
    const auto file = path("pruned_" + m + ".ckpt");
    if (skip("prune " + m, file, Kind::checkpoint, fp)) continue;
    require(path("alloc_" + m + ".json"), Kind::json, fp_alloc(m), "allocate --method " + m);
    const auto a = alloc::from_json(read_text(path("alloc_" + m + ".json")));
    if (!ckpt) ckpt = load_lm();
    const auto pruned = lm::apply_prune(*ckpt, lm::PruneSpec{a.retention, lm::PruneCriterion::magnitude});
    const double kept = lm::head_projection_density(pruned);
    lm::save_checkpoint(pruned, file.string(), extra(fp, {{"method", m}, {"head_projection_density", kept}}));
    out_ << "prune " << m << ": head projection density " << fixed(kept, 4) << ", wrote " << file.filename().string()
         << "\n";
  }
  return exit_code::ok;
}

int Runner::report() {
  std::vector<std::string> methods;
  for (const auto& m : kMethods)
    if (fs::exists(path("pruned_" + m + ".ckpt"))) methods.push_back(m);
  std::vector<std::string> parts{"report", fp_lm()};
  for (const auto& m : methods) parts.push_back(fp_prune(m));
  const auto fp = fingerprint(parts, {"eval"});
  if (skip("report", path("manifest.json"), Kind::json, fp)) return exit_code::ok;

  const auto corpus_hex = hex64(corpus_fp());
  std::vector<std::pair<std::string, double>> rows{{"dense", eval_ppl(load_lm())}};
  for (const auto& m : methods) {
    const auto file = path("pruned_" + m + ".ckpt");
    const auto prov = stored_provenance(file, Kind::checkpoint);
    if (!prov || prov->value("corpus_fingerprint", "") != corpus_hex) {
      throw ArtifactError("refusing to mix artifacts: " + file.filename().string() + " has another corpus fingerprint");
    }
    require(file, Kind::checkpoint, fp_prune(m), "prune --method " + m);
    rows.emplace_back(m, eval_ppl(lm::load_checkpoint(file.string())));
  }
  const double dense = rows.front().second;
  std::optional<double> uniform;
  for (const auto& [m, p] : rows)
    if (m == "uniform") uniform = p;
  std::ostringstream csv;
  csv << "method,ppl,delta_ppl_vs_dense,delta_ppl_vs_uniform\n";
  for (const auto& [m, p] : rows) {
    csv << m << ',' << fixed(p) << ',' << fixed(p - dense) << ',';
    if (uniform && m != "dense") csv << fixed(p - *uniform);
    csv << '\n';
  }
  write_text(path("report.csv"), csv.str());

  json files = json::object();
  std::vector<fs::path> listing;
  for (const auto& entry : fs::directory_iterator(workdir_))
    if (entry.is_regular_file() && entry.path().filename() != "manifest.json") listing.push_back(entry.path());
  std::sort(listing.begin(), listing.end());
  for (const auto& p : listing) files[p.filename().string()] = file_hash(p);
  json config = json::object();
  for (const auto& [k, v] : config_.values())
    if (k != "workdir") config[k] = v;
  json fingerprints = {{"lm", fp_lm()}, {"acts", fp_acts()}, {"sae", fp_sae()}, {"density", fp_density()}};
  for (const auto& m : methods) fingerprints["alloc_" + m] = fp_alloc(m);
  const json manifest = {{"config", config}, {"methods", methods}, {"fingerprints", fingerprints}, {"files", files}};
  write_text(path("manifest.json"), with_provenance(manifest.dump(), fp));
  out_ << csv.str();
  return exit_code::ok;
}

int Runner::simulate() {
  const auto fp = fp_sim();
  if (skip("simulate-theorems", path("theorem1.json"), Kind::json, fp)) return exit_code::ok;
  const auto t1 = redsim::theorem1_experiment(config_.theorem1());
  write_text(path("theorem1.json"), with_provenance(redsim::to_json(t1), fp, false));
  write_text(path("theorem1_curve.csv"), redsim::curve_csv(t1));
  const auto t2cfg = config_.theorem2();
  const auto t2 = redsim::theorem2_experiment(t2cfg);
  write_text(path("theorem2.json"), with_provenance(redsim::to_json(t2), fp, false));
  auto control_cfg = t2cfg;
  control_cfg.entropy_targets.assign(static_cast<std::size_t>(t2cfg.k), config_.real("sim.control_entropy"));
  const auto control = redsim::theorem2_experiment(control_cfg);
  write_text(path("theorem2_control.json"), with_provenance(redsim::to_json(control), fp, false));
  if (t1.testable) {
    out_ << "theorem 1: spearman(entropy, destruction) " << fixed(t1.correlation.coefficient, 4) << " p "
         << fixed(t1.correlation.p_value, 4) << "\n";
  } else {
    out_ << "theorem 1: monotonicity untestable at these settings\n";
  }
  out_ << "theorem 2: destruction uniform " << fixed(t2.aggregate_uniform.mean, 4) << " vs cgc-l "
       << fixed(t2.aggregate_cgc.mean, 4) << " (difference " << fixed(t2.difference, 4) << ", se "
       << fixed(t2.difference_se, 4) << "); control difference " << fixed(control.difference, 4) << "\n";
  return exit_code::ok;
}

}  // namespace

PipelineConfig PipelineConfig::defaults() {
  PipelineConfig c;
  for (const auto& [k, v] : kDefaults) c.values_[k] = v;
  return c;
}

void PipelineConfig::merge_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ArtifactError("cannot read config file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw InvalidArgument(path + ":" + std::to_string(lineno) + ": expected key = value");
    }
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  if (get("config_version") != std::to_string(kConfigVersion)) {
    throw InvalidArgument("unsupported config_version " + get("config_version"));
  }
}

void PipelineConfig::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw InvalidArgument("unknown config key '" + key + "'");
  it->second = value;
}

void PipelineConfig::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw InvalidArgument("expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::string& PipelineConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw InvalidArgument("unknown config key '" + key + "'");
  return it->second;
}

double PipelineConfig::real(const std::string& key) const {
  const auto& v = get(key);
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(x)) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw InvalidArgument("config key '" + key + "' needs a number, got '" + v + "'");
  }
}

long long PipelineConfig::integer(const std::string& key) const {
  const auto& v = get(key);
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw InvalidArgument("config key '" + key + "' needs an integer, got '" + v + "'");
  }
}

std::vector<double> PipelineConfig::reals(const std::string& key) const {
  std::vector<double> out;
  std::stringstream ss(get(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(trim(item)));
    } catch (const std::exception&) {
      throw InvalidArgument("config key '" + key + "' needs a comma-separated list of numbers");
    }
  }
  return out;
}

void PipelineConfig::validate() const {
  if (get("config_version") != std::to_string(kConfigVersion)) throw InvalidArgument("unsupported config_version");
  if (get("preset") != "desk" && get("preset") != "custom") throw InvalidArgument("preset must be desk or custom");
  if (integer("seed") < 0) throw InvalidArgument("seed must be nonnegative");
  if (integer("corpus.shards") < 2) throw InvalidArgument("need at least two corpus shards (categories)");
  const double holdout = real("corpus.holdout");
  if (!(holdout > 0.0 && holdout < 1.0)) throw InvalidArgument("corpus.holdout must lie in (0,1)");
  for (const auto* k : {"corpus.bytes", "calib.n_seq", "calib.seq_len", "eval.n_chunks", "eval.chunk_len"})
    if (integer(k) < 1) throw InvalidArgument(std::string(k) + " must be positive");
  if (integer("calib.seq_len") > integer("model.context_len") || integer("eval.chunk_len") > integer("model.context_len"))
    throw InvalidArgument("calibration and evaluation lengths must not exceed model.context_len");
  model().validate();
  sae(static_cast<int>(integer("model.d_head"))).validate();
  density().validate();
  evo().validate();
  const auto g = get("importance.aggregation");
  if (g != "mean" && g != "sum") throw InvalidArgument("importance.aggregation must be mean or sum");
  const auto t = get("alloc.transfer");
  if (t != "concave" && t != "linear") throw InvalidArgument("alloc.transfer must be concave or linear");
  auto p = problem_template();
  p.sizes = {1};
  p.density = {0.5};
  p.validate();
  const auto dm = get("sim.direction_model");
  if (dm != "entropy_coupled" && dm != "isotropic") throw InvalidArgument("sim.direction_model must be entropy_coupled or isotropic");
  const auto w = get("sim.weighting");
  if (w != "activity" && w != "uniform_count") throw InvalidArgument("sim.weighting must be activity or uniform_count");
}

std::uint64_t PipelineConfig::seed(const std::string& name) const {
  const auto it = std::find(kSeedNames.begin(), kSeedNames.end(), name);
  if (it == kSeedNames.end()) throw InvalidArgument("unknown seed name " + name);
  return derive_seed(static_cast<std::uint64_t>(integer("seed")), static_cast<std::uint64_t>(it - kSeedNames.begin()));
}

std::map<std::string, std::uint64_t> PipelineConfig::seeds() const {
  std::map<std::string, std::uint64_t> out;
  for (const auto& n : kSeedNames) out[n] = seed(n);
  return out;
}

lm::ModelConfig PipelineConfig::model() const {
  lm::ModelConfig m;
  m.n_layers = static_cast<int>(integer("model.n_layers"));
  m.n_heads = static_cast<int>(integer("model.n_heads"));
  m.d_head = static_cast<int>(integer("model.d_head"));
  m.d_ffn = static_cast<int>(integer("model.d_ffn"));
  m.context_len = static_cast<int>(integer("model.context_len"));
  m.vocab_size = corpus::kByteVocab;
  m.seed = seed("init");
  return m;
}

lm::TrainHyper PipelineConfig::train() const {
  lm::TrainHyper h;
  h.steps = static_cast<int>(integer("train.steps"));
  h.batch_size = static_cast<int>(integer("train.batch_size"));
  h.lr = real("train.lr");
  h.min_lr_ratio = real("train.min_lr_ratio");
  h.warmup_steps = static_cast<int>(integer("train.warmup"));
  h.weight_decay = real("train.weight_decay");
  h.grad_clip = real("train.grad_clip");
  return h;
}

sae::SaeConfig PipelineConfig::sae(int d_in) const {
  sae::SaeConfig c;
  c.d_in = d_in;
  c.dict_size = static_cast<int>(integer("sae.dict_size"));
  c.k = static_cast<int>(integer("sae.k"));
  c.l1_coeff = real("sae.l1");
  c.lr = real("sae.lr");
  c.epochs = static_cast<int>(integer("sae.epochs"));
  c.batch_size = static_cast<int>(integer("sae.batch_size"));
  c.seed = seed("sae");
  return c;
}

density::DensityParams PipelineConfig::density() const {
  density::DensityParams p;
  p.tau_min = real("density.tau_min");
  p.gamma = real("density.gamma");
  if (get("density.alpha") != "equal") {
    const auto a = reals("density.alpha");
    if (a.size() != 3) throw InvalidArgument("density.alpha needs three weights or 'equal'");
    p.alpha = {a[0], a[1], a[2]};
  }
  p.n_pairs = static_cast<int>(integer("density.n_pairs"));
  p.pair_seed = static_cast<std::uint64_t>(integer("density.pair_seed"));
  const auto& g = get("density.granularity");
  if (g != "sequence" && g != "token") throw InvalidArgument("density.granularity must be sequence or token");
  p.granularity = g == "token" ? density::Granularity::token : density::Granularity::sequence;
  return p;
}

alloc::AllocationProblem PipelineConfig::problem_template() const {
  alloc::AllocationProblem p;
  p.rho = real("alloc.rho");
  p.rho_min = real("alloc.rho_min");
  p.rho_max = real("alloc.rho_max");
  p.grid = alloc::AllocationProblem::uniform_grid(static_cast<int>(integer("alloc.grid_steps")));
  p.transfer = get("alloc.transfer") == "linear" ? alloc::Transfer::linear : alloc::Transfer::concave;
  p.gamma = real("alloc.gamma");
  return p;
}

alloc::EvoConfig PipelineConfig::evo() const {
  alloc::EvoConfig e;
  e.population = static_cast<int>(integer("evo.population"));
  e.generations = static_cast<int>(integer("evo.generations"));
  e.mutations = static_cast<int>(integer("evo.mutations"));
  e.elite = static_cast<int>(integer("evo.elite"));
  e.fitness_sample = static_cast<int>(integer("evo.fitness_sample"));
  e.seed = seed("evo");
  return e;
}

redsim::Theorem1Config PipelineConfig::theorem1() const {
  redsim::Theorem1Config c;
  c.d = static_cast<int>(integer("sim.d"));
  c.f = static_cast<int>(integer("sim.f"));
  c.zipf_levels = reals("sim.zipf_levels");
  c.s_grid = reals("sim.s_grid");
  c.eta_sweep = reals("sim.eta_sweep");
  c.params.s = real("sim.s");
  c.params.eta = real("sim.eta");
  c.params.trials = static_cast<int>(integer("sim.trials"));
  c.params.seed = derive_seed(seed("sim"), 1);
  c.params.weighting = get("sim.weighting") == "uniform_count" ? redsim::Weighting::uniform_count
                                                               : redsim::Weighting::activity;
  c.model = get("sim.direction_model") == "entropy_coupled" ? redsim::DirectionModel::entropy_coupled
                                                            : redsim::DirectionModel::isotropic;
  c.seed = derive_seed(seed("sim"), 0);
  return c;
}

redsim::Theorem2Config PipelineConfig::theorem2() const {
  const auto t1 = theorem1();
  redsim::Theorem2Config c;
  c.k = static_cast<int>(integer("sim.k"));
  c.d = t1.d;
  c.f = t1.f;
  c.rho = real("sim.rho");
  c.entropy_low = real("sim.entropy_low");
  c.entropy_high = real("sim.entropy_high");
  c.problem_template = problem_template();
  c.params = t1.params;
  c.params.seed = derive_seed(seed("sim"), 3);
  c.model = t1.model;
  c.seed = derive_seed(seed("sim"), 2);
  return c;
}

std::string PipelineConfig::to_text(bool include_workdir) const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) {
    if (!include_workdir && k == "workdir") continue;
    os << k << " = " << v << "\n";
  }
  return os.str();
}

std::vector<std::string> subcommand_names() {
  return {"show-config", "make-corpus", "train-lm",  "eval-ppl", "dump-acts", "train-saes",        "density",
          "wanda",       "ablate-scan", "correlate", "allocate", "prune",     "simulate-theorems", "report"};
}

int run_subcommand(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Capability-guided compression lab", "cgc"};
  app.fallthrough();
  app.require_subcommand(1, 1);
  std::string config_path, workdir, seed, method = "all", checkpoint;
  std::vector<std::string> sets;
  bool force = false;
  app.add_option("--config", config_path, "key = value config file (defaults: desk preset)");
  app.add_option("--workdir", workdir, "artifact directory (overrides workdir)");
  app.add_option("--seed", seed, "base seed (overrides seed)");
  app.add_option("--set", sets, "override one config key, key=value; repeatable")->allow_extra_args(false);
  app.add_flag("--force", force, "recompute even when outputs are up to date");

  const std::map<std::string, std::string> help = {
      {"show-config", "print the effective configuration"},
      {"make-corpus", "write the corpus used by the pipeline to corpus.txt"},
      {"train-lm", "train the transformer -> lm.ckpt"},
      {"eval-ppl", "held-out perplexity of lm.ckpt or --checkpoint"},
      {"dump-acts", "capture per-head calibration activations -> acts.cgca"},
      {"train-saes", "train one TopK SAE per head -> saes.cgcs"},
      {"density", "capability density map -> density.json/csv"},
      {"wanda", "per-head Wanda and magnitude importance -> importance.json/csv"},
      {"ablate-scan", "per-head ablation perplexity change -> ablation.json/csv"},
      {"correlate", "density vs importance correlations -> correlation.json"},
      {"allocate", "retention allocation -> alloc_<method>.json"},
      {"prune", "apply allocations -> pruned_<method>.ckpt"},
      {"simulate-theorems", "synthetic redundancy simulations -> theorem*.json"},
      {"report", "perplexity table -> report.csv and manifest.json"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& name : subcommand_names()) subs[name] = app.add_subcommand(name, help.at(name));
  subs["allocate"]->add_option("--method", method, "uniform | cgc-l | cgc-f | inverted")
      ->required()
      ->check(CLI::IsMember(kMethods));
  std::vector<std::string> prune_methods = kMethods;
  prune_methods.push_back("all");
  subs["prune"]->add_option("--method", method, "method to prune, or all available")->check(CLI::IsMember(prune_methods));
  subs["eval-ppl"]->add_option("--checkpoint", checkpoint, "checkpoint to evaluate instead of lm.ckpt");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return exit_code::ok;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << app.help();
    return exit_code::usage;
  }
  std::string name;
  for (const auto& [n, sub] : subs)
    if (sub->parsed()) name = n;

  try {
    auto config = PipelineConfig::defaults();
    if (!config_path.empty()) config.merge_file(config_path);
    for (const auto& s : sets) config.set_assignment(s);
    if (!workdir.empty()) config.set("workdir", workdir);
    if (!seed.empty()) config.set("seed", seed);
    config.validate();
    Runner runner(std::move(config), force, out, err);
    return runner.run(name, method, checkpoint);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return exit_code::usage;
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::usage;
  } catch (const InfeasibleError& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::usage;
  } catch (const ArtifactError& e) {
    err << "artifact error: " << e.what() << "\n";
    return exit_code::artifact;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return exit_code::numeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::usage;
  }
}

}  // namespace cgc::pipeline

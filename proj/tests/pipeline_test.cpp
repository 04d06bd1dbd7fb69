#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cgc/error.hpp"
#include "cgc/pipeline.hpp"

using namespace cgc;
using namespace cgc::pipeline;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kSmall = {
    "corpus.bytes=40000", "model.n_layers=1",   "model.n_heads=2",    "model.d_head=4",     "model.d_ffn=16",
    "model.context_len=16", "train.steps=4",    "train.batch_size=2", "train.warmup=1",     "calib.n_seq=16",
    "calib.seq_len=16",   "eval.n_chunks=2",    "eval.chunk_len=16",  "sae.dict_size=16",   "sae.k=2",
    "sae.epochs=1",       "sae.batch_size=16",  "evo.population=4",   "evo.generations=2",  "evo.fitness_sample=2",
    "sim.d=8",            "sim.f=8",            "sim.trials=10",      "sim.k=3",
};

struct Run {
  int code;
  std::string out, err;
};

Run cli(const std::string& workdir, std::vector<std::string> args, const std::vector<std::string>& extra = {}) {
  std::vector<std::string> full{"--workdir", workdir};
  for (const auto& s : kSmall) {
    full.push_back("--set");
    full.push_back(s);
  }
  for (const auto& s : extra) {
    full.push_back("--set");
    full.push_back(s);
  }
  full.insert(full.end(), args.begin(), args.end());
  std::ostringstream out, err;
  const int code = run_subcommand(full, out, err);
  return {code, out.str(), err.str()};
}

std::string fresh_dir(const std::string& name) {
  const auto d = fs::path(::testing::TempDir()) / name;
  fs::remove_all(d);
  return d.string();
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

}  // namespace

TEST(Config, DefaultsParseAndOverride) {
  auto c = PipelineConfig::defaults();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.integer("model.n_heads"), 8);
  c.set_assignment("alloc.rho=0.4");
  EXPECT_DOUBLE_EQ(c.real("alloc.rho"), 0.4);
  EXPECT_THROW(c.set_assignment("no_equals_sign"), InvalidArgument);
  EXPECT_THROW(c.set_assignment("unknown.key=1"), InvalidArgument);
  EXPECT_NE(c.seed("train"), c.seed("sae"));
}

TEST(Config, FileMergeAndRejects) {
  const auto path = fs::path(::testing::TempDir()) / "t.conf";
  std::ofstream(path) << "# comment\nseed = 7\nalloc.rho = 0.3  # trailing\n";
  auto c = PipelineConfig::defaults();
  c.merge_file(path.string());
  EXPECT_EQ(c.integer("seed"), 7);
  EXPECT_DOUBLE_EQ(c.real("alloc.rho"), 0.3);
  std::ofstream(path) << "config_version = 9\n";
  auto d = PipelineConfig::defaults();
  EXPECT_THROW(
      {
        d.merge_file(path.string());
        d.validate();
      },
      InvalidArgument);
}

TEST(Cli, UsageErrors) {
  std::ostringstream out, err;
  EXPECT_EQ(run_subcommand({}, out, err), exit_code::usage);
  EXPECT_EQ(run_subcommand({"no-such-command"}, out, err), exit_code::usage);
  EXPECT_EQ(run_subcommand({"allocate", "--method", "bogus"}, out, err), exit_code::usage);
  EXPECT_EQ(run_subcommand({"--set", "alloc.rho=2", "show-config"}, out, err), exit_code::usage);
  EXPECT_EQ(run_subcommand({"--help"}, out, err), exit_code::ok);
}

TEST(Cli, MissingUpstreamIsArtifactError) {
  const auto w = fresh_dir("missing");
  const auto r = cli(w, {"density"});
  EXPECT_EQ(r.code, exit_code::artifact);
  EXPECT_NE(r.err.find("missing upstream artifact"), std::string::npos);
}

TEST(Cli, SmallChainSkipsStaleGuardsAndReproduces) {
  const auto w = fresh_dir("chain");
  for (const auto& step : std::vector<std::vector<std::string>>{{"train-lm"},
                                                                {"dump-acts"},
                                                                {"train-saes"},
                                                                {"density"},
                                                                {"wanda"},
                                                                {"ablate-scan"},
                                                                {"correlate"},
                                                                {"allocate", "--method", "uniform"},
                                                                {"allocate", "--method", "cgc-l"},
                                                                {"allocate", "--method", "cgc-f"},
                                                                {"allocate", "--method", "inverted"},
                                                                {"prune"},
                                                                {"report"},
                                                                {"simulate-theorems"}}) {
    const auto r = cli(w, step);
    ASSERT_EQ(r.code, exit_code::ok) << step[0] << ": " << r.err;
  }
  for (const char* f : {"lm.ckpt", "acts.cgca", "saes.cgcs", "density.json", "density.csv", "importance.json",
                        "ablation.json", "correlation.json", "alloc_cgc-f_trace.csv", "pruned_uniform.ckpt",
                        "report.csv", "manifest.json", "theorem1.json", "theorem2.json", "theorem2_control.json"})
    EXPECT_TRUE(fs::exists(fs::path(w) / f)) << f;
  const auto report = slurp(fs::path(w) / "report.csv");
  EXPECT_EQ(report.rfind("method,ppl,delta_ppl_vs_dense,delta_ppl_vs_uniform", 0), 0u);
  EXPECT_NE(report.find("dense,"), std::string::npos);

  const auto again = cli(w, {"density"});
  EXPECT_EQ(again.code, exit_code::ok);
  EXPECT_NE(again.out.find("up to date"), std::string::npos);

  // Changing an SAE setting makes the bank, and everything after it, stale.
  const auto stale = cli(w, {"density"}, {"sae.k=3"});
  EXPECT_EQ(stale.code, exit_code::artifact);
  EXPECT_NE(stale.err.find("stale artifact saes.cgcs"), std::string::npos);

  // Same config in another directory gives byte-identical artifacts.
  const auto w2 = fresh_dir("chain2");
  for (const auto& step : std::vector<std::vector<std::string>>{
           {"train-lm"}, {"dump-acts"}, {"train-saes"}, {"density"}, {"allocate", "--method", "cgc-l"}}) {
    ASSERT_EQ(cli(w2, step).code, exit_code::ok);
  }
  for (const char* f : {"lm.ckpt", "acts.cgca", "saes.cgcs", "density.json", "alloc_cgc-l.json"})
    EXPECT_EQ(slurp(fs::path(w) / f), slurp(fs::path(w2) / f)) << f;
}

TEST(Cli, ShowConfigEchoesOverrides) {
  const auto r = cli(fresh_dir("show"), {"show-config"}, {"alloc.rho=0.45"});
  EXPECT_EQ(r.code, exit_code::ok);
  EXPECT_NE(r.out.find("alloc.rho = 0.45"), std::string::npos);
}

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "cgc/alloc.hpp"
#include "cgc/density.hpp"
#include "cgc/redsim.hpp"
#include "cgc/sae.hpp"
#include "cgc/tinylm.hpp"

namespace cgc::pipeline {

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int usage = 1;
inline constexpr int artifact = 2;
inline constexpr int numeric = 3;
}  // namespace exit_code

inline constexpr int kConfigVersion = 1;

/// Flat key=value configuration. Every key has a desk-preset default; files
/// and --set flags may only override known keys.
class PipelineConfig {
 public:
  static PipelineConfig defaults();

  // Reads `key = value` lines ('#' starts a comment) over the current values.
  void merge_file(const std::string& path);
  void set(const std::string& key, const std::string& value);
  void set_assignment(const std::string& assignment);  // "key=value"

  const std::string& get(const std::string& key) const;
  double real(const std::string& key) const;
  long long integer(const std::string& key) const;
  std::vector<double> reals(const std::string& key) const;  // comma-separated

  void validate() const;

  // Named seeds, all derived from `seed`: corpus, init, train, calib, sae,
  // evo, sim.
  std::uint64_t seed(const std::string& name) const;
  std::map<std::string, std::uint64_t> seeds() const;

  lm::ModelConfig model() const;
  lm::TrainHyper train() const;
  sae::SaeConfig sae(int d_in) const;
  density::DensityParams density() const;
  alloc::AllocationProblem problem_template() const;
  alloc::EvoConfig evo() const;
  redsim::Theorem1Config theorem1() const;
  redsim::Theorem2Config theorem2() const;

  // Canonical document, keys sorted. `workdir` is left out when
  // include_workdir is false so artifacts do not depend on where they live.
  std::string to_text(bool include_workdir = true) const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

std::vector<std::string> subcommand_names();

/// Runs one CLI invocation (args excludes the program name). Results and
/// short status lines go to `out`, progress to `err`. Returns an exit code.
int run_subcommand(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cgc::pipeline

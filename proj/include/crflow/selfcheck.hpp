#pragma once

// Numerical invariant suites run by `crflow selfcheck` and, with larger
// sizes, by the acceptance runner.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace crflow {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::vector<std::pair<std::string, double>> measured;
  std::string detail;  // first failing invariant, or empty
  double seconds = 0.0;
};

struct SelfcheckOptions {
  std::uint64_t seed = 0;
  bool fault_coupling_logdet_sign = false;
  int roundtrip_pairs = 3;
  int cr_images = 20;
  int gradcheck_coords = 50;
  int sampler_draws = 100000;
  // Directory of PNGs for the ISP suite; empty uses procedural scenes.
  std::filesystem::path isp_images;
  int isp_count = 10;
};

SuiteResult check_invertibility(const SelfcheckOptions& o);
SuiteResult check_logdet(const SelfcheckOptions& o);
SuiteResult check_gradcheck(const SelfcheckOptions& o);
SuiteResult check_density(const SelfcheckOptions& o);
SuiteResult check_cr_invariance(const SelfcheckOptions& o);
SuiteResult check_noise(const SelfcheckOptions& o);
SuiteResult check_isp(const SelfcheckOptions& o);
SuiteResult check_metrics(const SelfcheckOptions& o);

const std::vector<std::string>& suite_names();
// Throws std::invalid_argument for an unknown name.
SuiteResult run_suite(const std::string& name, const SelfcheckOptions& o);

std::string suites_json(const std::vector<SuiteResult>& results);
std::string suites_table(const std::vector<SuiteResult>& results);

}  // namespace crflow

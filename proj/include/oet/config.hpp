#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "oet/datasets.hpp"
#include "oet/harness.hpp"
#include "oet/injection.hpp"
#include "oet/optimizers.hpp"
#include "oet/targets.hpp"

namespace oet {

// Target description as it appears in the run-config; weights load only when
// the target is actually resolved, so file-free stages (convert, eval,
// report) never touch them.
struct TargetSpec {
  TargetKind kind = TargetKind::mock;
  std::string name;
  double temperature = 0.6;
  int max_new_tokens = 64;

  std::string weights;  // local

  std::string base_url;  // remote
  std::string model;
  int max_retries = 3;
  int max_in_flight = 4;

  std::string trigger;  // mock
  std::string response;
};

struct DatasetSubsetSpec {
  std::string name;
  std::string domain;
  std::string raw;
  AdapterSpec adapter;
  int n_test = 0;
  int n_train = 0;
};

struct DatasetSpec {
  std::string name;
  std::string domain;
  std::string raw;
  AdapterSpec adapter;
  int n_test = 0;
  int n_train = 0;
  std::vector<DatasetSubsetSpec> subsets;  // composite form when nonempty

  bool is_composite() const { return !subsets.empty(); }
};

struct ProtocolConfig {
  int trials = 5;
  double temperature = 0.6;
  int max_new_tokens = 64;
  std::vector<AsrMode> asr_modes = {AsrMode::per_case_any, AsrMode::per_trial};
  int workers = 4;
  bool case_sensitive = false;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir;
  std::vector<TargetSpec> targets;
  std::vector<DatasetSpec> datasets;
  AttackGoal goal;
  PromptTemplate tmpl;
  InjectionPosition position = InjectionPosition::data_end;
  OptimizerConfig optimizer;
  ProtocolConfig protocol;
};

// Strict parse: unknown keys anywhere raise config_error naming the JSON
// path; every cross-reference (duplicate names, pair attacker) is checked
// before anything runs.
RunConfig load_config(const std::string& path);
RunConfig config_from_json(const nlohmann::json& root);

// Fully-defaulted echo of the configuration actually in effect.
nlohmann::json effective_config_json(const RunConfig& config);

const TargetSpec& find_target_spec(const RunConfig& config, const std::string& name);
const DatasetSpec& find_dataset_spec(const RunConfig& config, const std::string& name);

// Builds the live handle (loads local weights from disk).
TargetHandle resolve_target(const RunConfig& config, const std::string& name);

// Runs the dataset's conversion with its derived seed.
DatasetSplit convert_dataset(const RunConfig& config, const DatasetSpec& spec);

AttackProtocol attack_protocol(const RunConfig& config);

}  // namespace oet
